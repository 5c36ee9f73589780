//! Edge-cloud speculative decoding: split rejection sampling, a compact wire
//! protocol, a discrete-event simulator of the pipelined protocol, and the
//! closed-form performance model it is checked against.

// Range checks are written `!(x >= 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod rejection;
pub mod rng;
pub mod scenario;
pub mod state;
pub mod transport;
pub mod types;
pub mod wire;

pub use metrics::{RunMetrics, Trace};
pub use models::{SequenceModel, TableModel};
pub use pipeline::{run, PipelineError, PipelineMode, PipelineSetup, RunOutcome};
pub use rejection::{DraftBatch, Verdict, VerdictKind};
pub use rng::{RandomStream, SessionStreams, StreamLabel};
pub use scenario::{ScenarioConfig, ScenarioError};
pub use state::SessionState;
pub use transport::ChannelConfig;
pub use types::{DenseDistribution, ProbError, SessionConfig, SparseDistribution, TokenId};
pub use wire::{Frame, FrameBody, FrameKind, WireError};
