//! Label-partitioned, counter-based random streams.
//!
//! Every stream is a ChaCha8 keystream selected by `(seed, label)`. Draw `i`
//! of a stream is a pure function of `(seed, label, i)`, so the edge and the
//! cloud can consume randomness at different rates without perturbing each
//! other, and a draw can be addressed directly by index.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamLabel {
    EdgeDraft,
    CloudAccept,
    EdgeResample,
    Network,
}

impl StreamLabel {
    fn stream_id(self) -> u64 {
        match self {
            StreamLabel::EdgeDraft => 1,
            StreamLabel::CloudAccept => 2,
            StreamLabel::EdgeResample => 3,
            StreamLabel::Network => 4,
        }
    }
}

const F64_SCALE: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    label: StreamLabel,
    rng: ChaCha8Rng,
    position: u64,
}

impl RandomStream {
    pub fn new(seed: u64, label: StreamLabel) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.stream_id());
        Self { seed, label, rng, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> StreamLabel {
        self.label
    }

    /// Number of sequential draws consumed so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// The `index`-th uniform of this stream in `[0, 1)`; does not move the
    /// sequential cursor.
    pub fn draw_at(&mut self, index: u64) -> f64 {
        // Each draw owns two 32-bit keystream words.
        self.rng.set_word_pos(index as u128 * 2);
        (self.rng.next_u64() >> 11) as f64 * F64_SCALE
    }

    /// Next sequential uniform in `[0, 1)`.
    pub fn draw_uniform(&mut self) -> f64 {
        let u = self.draw_at(self.position);
        self.position += 1;
        u
    }

    /// Standard normal via Box-Muller over two sequential uniforms.
    pub fn draw_standard_normal(&mut self) -> f64 {
        let u1 = self.draw_uniform();
        let u2 = self.draw_uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// The four streams of one session, all derived from a single seed.
#[derive(Debug, Clone)]
pub struct SessionStreams {
    pub edge_draft: RandomStream,
    pub cloud_accept: RandomStream,
    pub edge_resample: RandomStream,
    pub network: RandomStream,
}

impl SessionStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            edge_draft: RandomStream::new(seed, StreamLabel::EdgeDraft),
            cloud_accept: RandomStream::new(seed, StreamLabel::CloudAccept),
            edge_resample: RandomStream::new(seed, StreamLabel::EdgeResample),
            network: RandomStream::new(seed, StreamLabel::Network),
        }
    }
}
