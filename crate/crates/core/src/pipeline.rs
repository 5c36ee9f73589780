//! Discrete-event execution of the edge/cloud speculative decoding loop.
//!
//! Both sides are state machines driven by two inputs, frame arrivals and
//! expiring timers, and produce frames and new timers. [`run`] wires them
//! to a [`SimChannel`] under a virtual clock; [`serve_edge`] and
//! [`serve_cloud`] drive the same actors over a TCP connection.
//!
//! Pipelined modes keep one batch in flight and pre-draft exactly one batch
//! beyond it. The pre-drafted batch is held until the verdict for the
//! in-flight batch arrives: on a hit it is sent at once and the next
//! pre-draft starts; on a miss it is discarded and drafting restarts from
//! the corrected context.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, CycleRecord, DraftRecord, MetricsError, RunMetrics, Trace, VerifyRecord};
use crate::models::SequenceModel;
use crate::rejection::{
    cloud_verify, draft_token, residual_resample, sample_seed_token, DraftBatch, RejectionError, VerdictKind,
};
use crate::rng::{RandomStream, StreamLabel};
use crate::state::{SessionState, StateError};
use crate::transport::{ChannelConfig, Direction, FramedStream, SimChannel, TransportError};
use crate::types::{ProbError, SessionConfig, TokenId};
use crate::wire::{self, Frame, FrameBody, WireError};

/// Timing comparisons in tests use this resolution.
pub const TICK_MS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineMode {
    /// Stop-and-wait: draft, send, wait for the verdict.
    #[serde(rename = "sync")]
    SyncBaseline,
    #[serde(rename = "async")]
    Async,
    #[serde(rename = "no-fastverify")]
    AsyncNoFastVerify,
    /// Pipelined, but the uplink carries dense draft distributions and the
    /// downlink dense target distributions.
    #[serde(rename = "no-splitrej")]
    AsyncNoSplitRejection,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 4] = [
        PipelineMode::Async,
        PipelineMode::AsyncNoFastVerify,
        PipelineMode::AsyncNoSplitRejection,
        PipelineMode::SyncBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::SyncBaseline => "sync",
            PipelineMode::Async => "async",
            PipelineMode::AsyncNoFastVerify => "no-fastverify",
            PipelineMode::AsyncNoSplitRejection => "no-splitrej",
        }
    }

    pub fn pipelined(self) -> bool {
        self != PipelineMode::SyncBaseline
    }

    pub fn fast_verify(self) -> bool {
        matches!(self, PipelineMode::Async | PipelineMode::AsyncNoSplitRejection)
    }

    pub fn split_rejection(self) -> bool {
        self != PipelineMode::AsyncNoSplitRejection
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PipelineMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected sync, async, no-fastverify or no-splitrej)"))
    }
}

/// Latency-aware truncation: a batch drafted while nothing is in flight is
/// cut short once its drafting time exceeds `beta` times the smoothed
/// verdict round trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationPolicy {
    #[serde(default = "TruncationPolicy::default_beta")]
    pub beta: f64,
    /// Weight of the newest round-trip sample.
    #[serde(default = "TruncationPolicy::default_decay")]
    pub ewma_decay: f64,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { beta: Self::default_beta(), ewma_decay: Self::default_decay() }
    }
}

impl TruncationPolicy {
    fn default_beta() -> f64 {
        1.25
    }

    fn default_decay() -> f64 {
        0.2
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta > 0.0) {
            return Err(format!("truncation beta {} must be > 0", self.beta));
        }
        if !(self.ewma_decay > 0.0 && self.ewma_decay <= 1.0) {
            return Err(format!("truncation ewma_decay {} must lie in (0, 1]", self.ewma_decay));
        }
        Ok(())
    }

    pub fn update(&self, ewma: Option<f64>, sample: f64) -> f64 {
        match ewma {
            None => sample,
            Some(prev) => prev + self.ewma_decay * (sample - prev),
        }
    }

    /// Whether a batch that has been drafting for `elapsed_ms` should be cut.
    pub fn should_truncate(&self, ewma: Option<f64>, elapsed_ms: f64) -> bool {
        ewma.is_some_and(|e| elapsed_ms > self.beta * e)
    }
}

/// Multiplies the per-token draft cost while the edge has received between
/// `from_cycle` (inclusive) and `until_cycle` (exclusive) verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpike {
    pub from_cycle: usize,
    #[serde(default)]
    pub until_cycle: Option<usize>,
    pub factor: f64,
}

/// Everything one run needs.
#[derive(Clone)]
pub struct PipelineSetup {
    pub draft: Arc<dyn SequenceModel>,
    pub target: Arc<dyn SequenceModel>,
    pub session: SessionConfig,
    pub channel: ChannelConfig,
    pub mode: PipelineMode,
    pub max_tokens: usize,
    pub prompt: Vec<TokenId>,
    pub prefill_ms: f64,
    pub truncation: Option<TruncationPolicy>,
    pub cost_spikes: Vec<CostSpike>,
}

impl fmt::Debug for PipelineSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PipelineSetup")
            .field("session", &self.session)
            .field("channel", &self.channel)
            .field("mode", &self.mode)
            .field("max_tokens", &self.max_tokens)
            .field("prompt_len", &self.prompt.len())
            .finish_non_exhaustive()
    }
}

impl PipelineSetup {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.session.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.channel.validate().map_err(PipelineError::Config)?;
        if self.draft.vocab_size() != self.session.vocab_size || self.target.vocab_size() != self.session.vocab_size {
            return bad("model vocabularies must equal the session vocab_size".into());
        }
        if self.max_tokens < 1 {
            return bad("max_tokens must be >= 1".into());
        }
        if self.session.gamma > u8::MAX as usize {
            return bad(format!("gamma {} does not fit the wire format", self.session.gamma));
        }
        if let Some(t) = self.prompt.iter().find(|t| t.index() >= self.session.vocab_size) {
            return bad(format!("prompt token {t} outside the vocabulary"));
        }
        if !(self.prefill_ms >= 0.0) {
            return bad(format!("prefill_ms {} must be >= 0", self.prefill_ms));
        }
        for (name, c) in [("draft", self.draft.token_cost_ms()), ("verify", self.target.token_cost_ms())] {
            if !(c >= 0.0) || !c.is_finite() {
                return bad(format!("{name} token cost {c} must be a finite value >= 0"));
            }
        }
        if let Some(t) = &self.truncation {
            t.validate().map_err(PipelineError::Config)?;
        }
        for s in &self.cost_spikes {
            if !(s.factor > 0.0) {
                return bad(format!("cost spike factor {} must be > 0", s.factor));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid setup: {0}")]
    Config(String),
    #[error(
        "edge and cloud committed sequences diverge at position {position} (edge {edge_len}, cloud {cloud_len} tokens)"
    )]
    Divergence { position: usize, edge_len: usize, cloud_len: usize },
    #[error("run stalled with {committed} of {needed} tokens committed")]
    Stalled { committed: usize, needed: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("config digest mismatch between edge and cloud")]
    DigestMismatch,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Rejection(#[from] RejectionError),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn protocol(msg: impl Into<String>) -> PipelineError {
    PipelineError::Protocol(msg.into())
}

/// Pending events ordered by `(time, insertion sequence)`.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
    now: f64,
}

#[derive(Debug)]
struct Entry<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), seq: 0, now: 0.0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `event` at `time`; times in the past are clamped to now.
    pub fn push(&mut self, time: f64, event: E) {
        let time = time.max(self.now);
        self.heap.push(Entry { time, seq: self.seq, event });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let e = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, e.event))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    DraftToken(u64),
    CloudPrefill,
    CloudJob(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub frame: Frame,
    /// Extra bytes charged on the simulated link but not encoded.
    pub phantom_bytes: usize,
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub frames: Vec<Outgoing>,
    pub timers: Vec<(f64, Timer)>,
}

impl Outbox {
    fn send(&mut self, frame: Frame) {
        self.frames.push(Outgoing { frame, phantom_bytes: 0 });
    }

    fn timer(&mut self, delay: f64, timer: Timer) {
        self.timers.push((delay, timer));
    }
}

/// Common driver interface of the two actors.
pub trait Actor {
    fn on_frame(&mut self, now: f64, frame: Frame, out: &mut Outbox) -> Result<(), PipelineError>;
    fn on_timer(&mut self, now: f64, timer: Timer, out: &mut Outbox) -> Result<(), PipelineError>;
    fn finished(&self) -> bool;
    fn committed(&self) -> &[TokenId];
}

fn tail(context: &[TokenId], order: usize) -> &[TokenId] {
    &context[context.len().saturating_sub(order)..]
}

#[derive(Debug)]
struct Drafting {
    batch_id: u32,
    base_pos: usize,
    tokens: Vec<TokenId>,
    probs: Vec<f32>,
    started_at: f64,
}

#[derive(Debug, Clone, Copy)]
struct Outstanding {
    batch_id: u32,
    sent_at: f64,
}

pub struct EdgeActor {
    draft: Arc<dyn SequenceModel>,
    mode: PipelineMode,
    gamma: usize,
    vocab: usize,
    prompt: Vec<TokenId>,
    max_tokens: usize,
    token_cost_ms: f64,
    spikes: Vec<CostSpike>,
    truncation: Option<TruncationPolicy>,
    ewma_round_trip: Option<f64>,
    state: SessionState,
    draft_stream: RandomStream,
    resample_stream: RandomStream,
    next_batch_id: u32,
    drafting: Option<Drafting>,
    timer_gen: u64,
    held: Option<u32>,
    outstanding: Option<Outstanding>,
    started: bool,
    done: bool,
    idle_since: Option<f64>,
    bubble_acc: f64,
    trace: Trace,
}

impl EdgeActor {
    pub fn new(setup: &PipelineSetup) -> Self {
        Self {
            draft: setup.draft.clone(),
            mode: setup.mode,
            gamma: setup.session.gamma,
            vocab: setup.session.vocab_size,
            prompt: setup.prompt.clone(),
            max_tokens: setup.max_tokens,
            token_cost_ms: setup.draft.token_cost_ms(),
            spikes: setup.cost_spikes.clone(),
            truncation: setup.truncation,
            ewma_round_trip: None,
            state: SessionState::new(setup.prompt.clone()),
            draft_stream: RandomStream::new(setup.session.seed, StreamLabel::EdgeDraft),
            resample_stream: RandomStream::new(setup.session.seed, StreamLabel::EdgeResample),
            // Batch id 0 tags the seed exchange.
            next_batch_id: 1,
            drafting: None,
            timer_gen: 0,
            held: None,
            outstanding: None,
            started: false,
            done: false,
            idle_since: None,
            bubble_acc: 0.0,
            trace: Trace::default(),
        }
    }

    /// Sends the prompt to the cloud; called once at time zero.
    pub fn start(&mut self, out: &mut Outbox) {
        out.send(Frame { batch_id: 0, body: FrameBody::Prefill { tokens: self.prompt.clone() } });
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    fn generated(&self, len: usize) -> usize {
        len - self.prompt.len()
    }

    fn go_idle(&mut self, now: f64) {
        if self.idle_since.is_none() {
            self.idle_since = Some(now);
        }
    }

    fn go_busy(&mut self, now: f64) {
        if let Some(since) = self.idle_since.take() {
            self.bubble_acc += now - since;
        }
    }

    fn spike_factor(&self) -> f64 {
        let cycle = self.trace.cycles.len();
        self.spikes
            .iter()
            .filter(|s| cycle >= s.from_cycle && s.until_cycle.is_none_or(|u| cycle < u))
            .map(|s| s.factor)
            .product()
    }

    fn schedule_token(&mut self, out: &mut Outbox) {
        self.timer_gen += 1;
        out.timer(self.token_cost_ms * self.spike_factor(), Timer::DraftToken(self.timer_gen));
    }

    fn abort_drafting(&mut self, now: f64) {
        if self.drafting.take().is_some() {
            self.timer_gen += 1;
            self.trace.aborted_drafts += 1;
            self.go_idle(now);
        }
    }

    fn start_batch(&mut self, now: f64, out: &mut Outbox) {
        let base_pos = self.state.frontier();
        if self.done || self.generated(base_pos) >= self.max_tokens {
            self.go_idle(now);
            return;
        }
        self.go_busy(now);
        let batch_id = self.next_batch_id;
        self.next_batch_id += 1;
        self.drafting = Some(Drafting { batch_id, base_pos, tokens: Vec::new(), probs: Vec::new(), started_at: now });
        self.schedule_token(out);
    }

    fn draft_one(&mut self, now: f64, out: &mut Outbox) -> Result<(), PipelineError> {
        let order = self.draft.order();
        let d = self.drafting.as_mut().expect("token timer implies an active batch");
        let mut ctx = self.state.frontier_context(order);
        ctx.extend_from_slice(&d.tokens);
        let q = self.draft.next_distribution(tail(&ctx, order));
        let pos = d.base_pos + d.tokens.len();
        let x = draft_token(q, pos, &mut self.draft_stream);
        d.tokens.push(x);
        d.probs.push(q.prob(x));

        if self.mode.fast_verify() && self.outstanding.is_some() {
            out.send(Frame {
                batch_id: d.batch_id,
                body: FrameBody::PreVerify { base_pos: d.base_pos as u32, tokens: d.tokens.clone() },
            });
        }
        let target_len = self.gamma;
        let truncate = d.tokens.len() < target_len
            && self.outstanding.is_none()
            && self.truncation.is_some_and(|p| p.should_truncate(self.ewma_round_trip, now - d.started_at));
        if d.tokens.len() >= target_len || truncate {
            self.finish_batch(now, truncate, out)
        } else {
            self.schedule_token(out);
            Ok(())
        }
    }

    fn finish_batch(&mut self, now: f64, truncated: bool, out: &mut Outbox) -> Result<(), PipelineError> {
        let d = self.drafting.take().expect("finishing an active batch");
        self.trace.drafts.push(DraftRecord {
            batch_id: d.batch_id,
            start: d.started_at,
            end: now,
            tokens: d.tokens.len(),
        });
        if truncated {
            self.trace.truncations += 1;
        }
        let batch_id = d.batch_id;
        self.state.append_speculative(DraftBatch::new(batch_id, d.base_pos, d.tokens, d.probs, truncated)?)?;
        if self.outstanding.is_some() {
            self.held = Some(batch_id);
            self.go_idle(now);
            return Ok(());
        }
        self.send_batch(batch_id, now, out)?;
        if self.mode.pipelined() {
            self.start_batch(now, out);
        } else {
            self.go_idle(now);
        }
        Ok(())
    }

    fn send_batch(&mut self, batch_id: u32, now: f64, out: &mut Outbox) -> Result<(), PipelineError> {
        let batch = self.state.batch(batch_id).ok_or(StateError::UnknownBatch(batch_id))?;
        let phantom_bytes = if self.mode.split_rejection() { 0 } else { batch.len() * self.vocab * 4 };
        out.frames.push(Outgoing { frame: Frame::from_batch(batch)?, phantom_bytes });
        self.outstanding = Some(Outstanding { batch_id, sent_at: now });
        Ok(())
    }

    fn finish_run(&mut self, now: f64) {
        self.abort_drafting(now);
        self.state.discard_all();
        self.held = None;
        self.done = true;
        self.idle_since = None;
    }

    fn on_verdict(&mut self, now: f64, frame: &Frame, out: &mut Outbox) -> Result<(), PipelineError> {
        let verdict = frame.to_verdict().expect("called on verdict frames")?;
        let sent = match self.outstanding {
            Some(o) if o.batch_id == verdict.batch_id => o,
            _ => return Err(protocol(format!("unexpected verdict for batch {}", verdict.batch_id))),
        };
        if let Some(since) = self.idle_since {
            self.bubble_acc += now - since;
            self.idle_since = Some(now);
        }
        if let Some(p) = &self.truncation {
            self.ewma_round_trip = Some(p.update(self.ewma_round_trip, now - sent.sent_at));
        }
        let batch = self.state.batch(sent.batch_id).cloned().ok_or(StateError::UnknownBatch(sent.batch_id))?;
        self.outstanding = None;
        let mut record = CycleRecord {
            batch_id: batch.batch_id,
            batch_len: batch.len(),
            truncated: batch.truncated,
            sent_at: sent.sent_at,
            verdict_at: now,
            accepted: verdict.accepted_count,
            corrected: false,
            bubble_ms: std::mem::take(&mut self.bubble_acc),
        };
        match &verdict.kind {
            VerdictKind::AllAccepted => {
                if verdict.accepted_count != batch.len() {
                    return Err(protocol("all-accepted verdict with a short count"));
                }
                self.state.commit(batch.batch_id, batch.len(), None)?;
                self.trace.cycles.push(record);
                if self.generated(self.state.committed_len()) >= self.max_tokens {
                    self.finish_run(now);
                } else if let Some(held) = self.held.take() {
                    self.send_batch(held, now, out)?;
                    self.start_batch(now, out);
                } else if self.drafting.is_none() {
                    self.start_batch(now, out);
                }
            }
            VerdictKind::Rejected { position, sparse_target } => {
                let j = *position;
                if j >= batch.len() || verdict.accepted_count != j {
                    return Err(protocol(format!("rejection position {j} invalid for batch of {}", batch.len())));
                }
                let order = self.draft.order();
                let mut ctx = tail(self.state.committed(), order).to_vec();
                ctx.extend_from_slice(&batch.tokens[..j]);
                let q = self.draft.next_distribution(tail(&ctx, order));
                let corrected = residual_resample(sparse_target, q, &mut self.resample_stream);
                self.state.commit(batch.batch_id, j, Some(corrected))?;
                self.held = None;
                self.abort_drafting(now);
                record.corrected = true;
                self.trace.cycles.push(record);
                out.send(Frame { batch_id: batch.batch_id, body: FrameBody::Seed { token: corrected } });
                if self.generated(self.state.committed_len()) >= self.max_tokens {
                    self.finish_run(now);
                } else {
                    self.start_batch(now, out);
                }
            }
        }
        Ok(())
    }
}

impl Actor for EdgeActor {
    fn on_frame(&mut self, now: f64, frame: Frame, out: &mut Outbox) -> Result<(), PipelineError> {
        match &frame.body {
            FrameBody::Seed { token } if !self.started => {
                self.state.push_committed(*token)?;
                self.started = true;
                self.trace.decode_start = Some(now);
                if self.generated(self.state.committed_len()) >= self.max_tokens {
                    self.done = true;
                } else {
                    self.go_idle(now);
                    self.start_batch(now, out);
                }
                Ok(())
            }
            FrameBody::Verdict { .. } => self.on_verdict(now, &frame, out),
            FrameBody::Interrupt { .. } => {
                self.abort_drafting(now);
                Ok(())
            }
            _ => Err(protocol(format!("edge received unexpected {:?} frame", frame.kind()))),
        }
    }

    fn on_timer(&mut self, now: f64, timer: Timer, out: &mut Outbox) -> Result<(), PipelineError> {
        match timer {
            Timer::DraftToken(gen) if gen == self.timer_gen && self.drafting.is_some() => self.draft_one(now, out),
            Timer::DraftToken(_) => Ok(()),
            other => Err(protocol(format!("edge received cloud timer {other:?}"))),
        }
    }

    fn finished(&self) -> bool {
        self.done
    }

    fn committed(&self) -> &[TokenId] {
        self.state.committed()
    }
}

#[derive(Debug, Clone)]
struct PreVerifyState {
    batch_id: u32,
    base_pos: usize,
    tokens: Vec<TokenId>,
    done: usize,
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Verify { batch_id: u32, start: f64, positions: usize, preverified: usize },
    PreVerify,
}

pub struct CloudActor {
    target: Arc<dyn SequenceModel>,
    fast_verify: bool,
    top_k: usize,
    token_cost_ms: f64,
    prefill_ms: f64,
    prompt: Vec<TokenId>,
    max_tokens: usize,
    state: SessionState,
    accept_stream: RandomStream,
    prefilled: bool,
    job: Option<Job>,
    timer_gen: u64,
    queue: VecDeque<DraftBatch>,
    pre: Option<PreVerifyState>,
    pending: Option<(u32, usize)>,
    last_batch: u32,
    trace: Trace,
}

impl CloudActor {
    pub fn new(setup: &PipelineSetup) -> Self {
        let top_k = if setup.mode.split_rejection() { setup.session.top_k } else { setup.session.vocab_size };
        Self {
            target: setup.target.clone(),
            fast_verify: setup.mode.fast_verify(),
            top_k,
            token_cost_ms: setup.target.token_cost_ms(),
            prefill_ms: setup.prefill_ms,
            prompt: setup.prompt.clone(),
            max_tokens: setup.max_tokens,
            state: SessionState::new(setup.prompt.clone()),
            accept_stream: RandomStream::new(setup.session.seed, StreamLabel::CloudAccept),
            prefilled: false,
            job: None,
            timer_gen: 0,
            queue: VecDeque::new(),
            pre: None,
            pending: None,
            last_batch: 0,
            trace: Trace::default(),
        }
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    /// Whether the peer may close now without losing a commit.
    pub fn quiescent(&self) -> bool {
        self.pending.is_none() && self.queue.is_empty() && self.state.in_flight_count() == 0
    }

    fn queued_frontier(&self) -> usize {
        self.state.frontier() + self.queue.iter().map(DraftBatch::len).sum::<usize>()
    }

    fn try_start(&mut self, now: f64, out: &mut Outbox) -> Result<(), PipelineError> {
        if self.job.is_some() {
            return Ok(());
        }
        if let Some(batch) = self.queue.pop_front() {
            let credit = match self.pre.take() {
                Some(p) if p.batch_id == batch.batch_id && p.base_pos == batch.base_pos => {
                    let common = p.tokens.iter().zip(&batch.tokens).take_while(|(a, b)| a == b).count();
                    p.done.min(common)
                }
                _ => 0,
            };
            let positions = batch.len() - credit;
            let batch_id = batch.batch_id;
            self.state.append_speculative(batch)?;
            self.timer_gen += 1;
            self.job = Some(Job::Verify { batch_id, start: now, positions, preverified: credit });
            out.timer(positions as f64 * self.token_cost_ms, Timer::CloudJob(self.timer_gen));
            return Ok(());
        }
        let ready = self.fast_verify
            && self.pending.is_none()
            && self.pre.as_ref().is_some_and(|p| p.base_pos == self.state.frontier() && p.done < p.tokens.len());
        if ready {
            self.timer_gen += 1;
            self.job = Some(Job::PreVerify);
            out.timer(self.token_cost_ms, Timer::CloudJob(self.timer_gen));
        }
        Ok(())
    }

    fn finish_verify(&mut self, now: f64, job: Job, out: &mut Outbox) -> Result<(), PipelineError> {
        let Job::Verify { batch_id, start, positions, preverified } = job else { unreachable!() };
        let batch = self.state.batch(batch_id).cloned().ok_or(StateError::UnknownBatch(batch_id))?;
        let verdict =
            cloud_verify(&batch, self.target.as_ref(), self.state.committed(), self.top_k, &mut self.accept_stream)?;
        self.trace.verifies.push(VerifyRecord {
            batch_id,
            start,
            end: now,
            positions,
            preverified,
            t_pre_ms: preverified as f64 * self.token_cost_ms,
        });
        self.last_batch = batch_id;
        match &verdict.kind {
            VerdictKind::Rejected { position, .. } => {
                out.send(Frame {
                    batch_id,
                    body: FrameBody::Interrupt { rollback_pos: (batch.base_pos + position) as u32 },
                });
                self.pending = Some((batch_id, *position));
                self.pre = None;
            }
            VerdictKind::AllAccepted => {
                self.state.commit(batch_id, batch.len(), None)?;
            }
        }
        out.send(Frame::from_verdict(&verdict)?);
        Ok(())
    }
}

impl Actor for CloudActor {
    fn on_frame(&mut self, now: f64, frame: Frame, out: &mut Outbox) -> Result<(), PipelineError> {
        match frame.body {
            FrameBody::Prefill { tokens } => {
                if self.prefilled || tokens != self.prompt {
                    return Err(protocol("prefill prompt does not match the cloud scenario"));
                }
                out.timer(self.prefill_ms, Timer::CloudPrefill);
                Ok(())
            }
            FrameBody::Draft { .. } => {
                let batch = frame.to_batch().expect("draft frame")?;
                let stale = !self.prefilled
                    || self.pending.is_some()
                    || batch.batch_id <= self.last_batch
                    || self.queue.back().is_some_and(|b| batch.batch_id <= b.batch_id)
                    || batch.base_pos != self.queued_frontier();
                if stale {
                    self.trace.stale_batches += 1;
                    return Ok(());
                }
                if matches!(self.job, Some(Job::PreVerify)) {
                    self.job = None;
                    self.timer_gen += 1;
                }
                self.queue.push_back(batch);
                self.try_start(now, out)
            }
            FrameBody::PreVerify { base_pos, tokens } => {
                let base_pos = base_pos as usize;
                let fresh = self.pending.is_none()
                    && frame.batch_id > self.last_batch
                    && self.queue.is_empty()
                    && base_pos == self.state.frontier();
                if !fresh {
                    self.trace.stale_preverify += 1;
                    return Ok(());
                }
                match &mut self.pre {
                    Some(p) if p.batch_id == frame.batch_id && p.base_pos == base_pos => {
                        if !tokens.starts_with(&p.tokens[..p.done]) {
                            p.done = 0;
                        }
                        p.tokens = tokens;
                    }
                    _ => self.pre = Some(PreVerifyState { batch_id: frame.batch_id, base_pos, tokens, done: 0 }),
                }
                self.try_start(now, out)
            }
            FrameBody::Seed { token } => match self.pending {
                Some((batch_id, accepted)) if batch_id == frame.batch_id => {
                    self.state.commit(batch_id, accepted, Some(token))?;
                    self.pending = None;
                    self.try_start(now, out)
                }
                _ => Err(protocol(format!("unexpected correction for batch {}", frame.batch_id))),
            },
            _ => Err(protocol(format!("cloud received unexpected {:?} frame", frame.kind()))),
        }
    }

    fn on_timer(&mut self, now: f64, timer: Timer, out: &mut Outbox) -> Result<(), PipelineError> {
        match timer {
            Timer::CloudPrefill => {
                let seed = sample_seed_token(self.target.as_ref(), &self.prompt, &mut self.accept_stream);
                self.state.push_committed(seed)?;
                self.prefilled = true;
                out.send(Frame { batch_id: 0, body: FrameBody::Seed { token: seed } });
                Ok(())
            }
            Timer::CloudJob(gen) if gen == self.timer_gen => match self.job.take() {
                Some(job @ Job::Verify { .. }) => {
                    self.finish_verify(now, job, out)?;
                    self.try_start(now, out)
                }
                Some(Job::PreVerify) => {
                    if let Some(p) = &mut self.pre {
                        p.done += 1;
                    }
                    self.try_start(now, out)
                }
                None => Ok(()),
            },
            Timer::CloudJob(_) => Ok(()),
            other => Err(protocol(format!("cloud received edge timer {other:?}"))),
        }
    }

    fn finished(&self) -> bool {
        self.quiescent() && self.state.committed_len() >= self.prompt.len() + self.max_tokens
    }

    fn committed(&self) -> &[TokenId] {
        self.state.committed()
    }
}

/// Transcript, metrics and raw trace of one run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Generated tokens, seed first.
    pub transcript: Vec<TokenId>,
    pub metrics: RunMetrics,
    pub trace: Trace,
    /// Virtual time at which the last event executed.
    pub end_time: f64,
}

#[derive(Debug)]
enum SimEvent {
    ToEdge(Vec<u8>),
    ToCloud(Vec<u8>),
    EdgeTimer(Timer),
    CloudTimer(Timer),
}

fn dispatch(
    out: Outbox,
    from_edge: bool,
    now: f64,
    channel: &mut SimChannel,
    queue: &mut EventQueue<SimEvent>,
) -> Result<(), PipelineError> {
    for o in out.frames {
        let bytes = wire::encode(&o.frame)?;
        let size = bytes.len() + o.phantom_bytes;
        if from_edge {
            let at = channel.send(Direction::Uplink, size, now);
            queue.push(at, SimEvent::ToCloud(bytes));
        } else {
            let at = channel.send(Direction::Downlink, size, now);
            queue.push(at, SimEvent::ToEdge(bytes));
        }
    }
    for (delay, t) in out.timers {
        queue.push(now + delay, if from_edge { SimEvent::EdgeTimer(t) } else { SimEvent::CloudTimer(t) });
    }
    Ok(())
}

/// Compares the two committed sequences.
pub fn check_consistency(edge: &[TokenId], cloud: &[TokenId]) -> Result<(), PipelineError> {
    if edge == cloud {
        return Ok(());
    }
    let position = edge.iter().zip(cloud).take_while(|(a, b)| a == b).count();
    Err(PipelineError::Divergence { position, edge_len: edge.len(), cloud_len: cloud.len() })
}

/// Runs one simulated session to completion.
pub fn run(setup: &PipelineSetup) -> Result<RunOutcome, PipelineError> {
    setup.validate()?;
    let mut edge = EdgeActor::new(setup);
    let mut cloud = CloudActor::new(setup);
    let mut channel = SimChannel::new(setup.channel, RandomStream::new(setup.session.seed, StreamLabel::Network));
    let mut queue = EventQueue::new();

    let mut out = Outbox::default();
    edge.start(&mut out);
    dispatch(out, true, 0.0, &mut channel, &mut queue)?;

    while let Some((now, event)) = queue.pop() {
        let mut out = Outbox::default();
        let from_edge = match event {
            SimEvent::ToEdge(bytes) => {
                edge.on_frame(now, wire::decode(&bytes)?, &mut out)?;
                true
            }
            SimEvent::ToCloud(bytes) => {
                cloud.on_frame(now, wire::decode(&bytes)?, &mut out)?;
                false
            }
            SimEvent::EdgeTimer(t) => {
                edge.on_timer(now, t, &mut out)?;
                true
            }
            SimEvent::CloudTimer(t) => {
                cloud.on_timer(now, t, &mut out)?;
                false
            }
        };
        dispatch(out, from_edge, now, &mut channel, &mut queue)?;
    }
    let end_time = queue.now();

    check_consistency(edge.committed(), cloud.committed())?;
    if !edge.finished() || !cloud.quiescent() {
        return Err(PipelineError::Stalled {
            committed: edge.committed().len() - setup.prompt.len(),
            needed: setup.max_tokens,
        });
    }
    let mut trace = edge.trace.clone();
    trace.verifies = cloud.trace.verifies.clone();
    trace.stale_batches = cloud.trace.stale_batches;
    trace.stale_preverify = cloud.trace.stale_preverify;
    let metrics = metrics::collect(&trace)?;
    Ok(RunOutcome { transcript: edge.committed()[setup.prompt.len()..].to_vec(), metrics, trace, end_time })
}

/// Per-cycle edge idle time of a run.
pub fn measure_bubble(trace: &Trace) -> Vec<f64> {
    trace.cycles.iter().map(|c| c.bubble_ms).collect()
}

/// What one side of a socket session ends with.
#[derive(Debug, Clone)]
pub struct SocketOutcome {
    pub committed: Vec<TokenId>,
    pub trace: Trace,
}

impl SocketOutcome {
    pub fn transcript(&self, prompt_len: usize) -> &[TokenId] {
        &self.committed[prompt_len..]
    }
}

enum Inbound {
    Frame(Vec<u8>),
    Closed,
    Failed(TransportError),
}

fn handshake(stream: &mut FramedStream, digest: &[u8]) -> Result<(), PipelineError> {
    stream.write_frame(digest)?;
    match stream.read_frame()? {
        Some(peer) if peer == digest => Ok(()),
        Some(_) => Err(PipelineError::DigestMismatch),
        None => Err(TransportError::PeerClosed.into()),
    }
}

fn spawn_reader(mut reader: FramedStream) -> mpsc::Receiver<Inbound> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || loop {
        let msg = match reader.read_frame() {
            Ok(Some(bytes)) => Inbound::Frame(bytes),
            Ok(None) => Inbound::Closed,
            Err(e) => Inbound::Failed(e),
        };
        let last = !matches!(msg, Inbound::Frame(_));
        if tx.send(msg).is_err() || last {
            break;
        }
    });
    rx
}

fn flush(
    stream: &mut FramedStream,
    out: Outbox,
    now: f64,
    timers: &mut EventQueue<Timer>,
) -> Result<(), PipelineError> {
    for o in out.frames {
        stream.write_frame(&wire::encode(&o.frame)?)?;
    }
    for (delay, t) in out.timers {
        timers.push(now + delay, t);
    }
    Ok(())
}

/// Drives one actor over a connected stream. Timers run on a local virtual
/// clock and are drained before blocking on the network; the transcript
/// does not depend on wall-clock timing.
fn drive_socket<A: Actor>(
    actor: &mut A,
    mut stream: FramedStream,
    digest: &[u8],
    initial: Outbox,
    is_edge: bool,
) -> Result<(), PipelineError> {
    handshake(&mut stream, digest)?;
    let rx = spawn_reader(stream.try_clone()?);
    let mut timers: EventQueue<Timer> = EventQueue::new();
    flush(&mut stream, initial, 0.0, &mut timers)?;
    let mut closed_write = false;
    loop {
        while let Some((now, t)) = timers.pop() {
            let mut out = Outbox::default();
            actor.on_timer(now, t, &mut out)?;
            flush(&mut stream, out, now, &mut timers)?;
        }
        if is_edge && actor.finished() && !closed_write {
            stream.finish()?;
            closed_write = true;
        }
        match rx.recv() {
            Ok(Inbound::Frame(bytes)) => {
                let now = timers.now();
                let mut out = Outbox::default();
                actor.on_frame(now, wire::decode(&bytes)?, &mut out)?;
                flush(&mut stream, out, now, &mut timers)?;
            }
            Ok(Inbound::Closed) if actor.finished() => {
                if !closed_write {
                    let _ = stream.finish();
                }
                return Ok(());
            }
            Ok(Inbound::Closed) => return Err(TransportError::PeerClosed.into()),
            Ok(Inbound::Failed(e)) => return Err(e.into()),
            Err(_) => return Err(TransportError::PeerClosed.into()),
        }
    }
}

/// Runs the edge side over `stream`. `digest` identifies the scenario; both
/// ends must present the same bytes.
pub fn serve_edge(setup: &PipelineSetup, stream: FramedStream, digest: &[u8]) -> Result<SocketOutcome, PipelineError> {
    setup.validate()?;
    let mut edge = EdgeActor::new(setup);
    let mut initial = Outbox::default();
    edge.start(&mut initial);
    drive_socket(&mut edge, stream, digest, initial, true)?;
    Ok(SocketOutcome { committed: edge.committed().to_vec(), trace: edge.trace.clone() })
}

/// Runs the cloud side over `stream` until the edge closes the session.
pub fn serve_cloud(setup: &PipelineSetup, stream: FramedStream, digest: &[u8]) -> Result<SocketOutcome, PipelineError> {
    setup.validate()?;
    let mut cloud = CloudActor::new(setup);
    drive_socket(&mut cloud, stream, digest, Outbox::default(), false)?;
    Ok(SocketOutcome { committed: cloud.committed().to_vec(), trace: cloud.trace.clone() })
}
