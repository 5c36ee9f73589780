//! Evaluation quantities computed from a run trace.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("run committed no tokens after the seed")]
    EmptyRun,
}

/// One verification round trip as seen by the edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub batch_id: u32,
    pub batch_len: usize,
    pub truncated: bool,
    pub sent_at: f64,
    pub verdict_at: f64,
    pub accepted: usize,
    pub corrected: bool,
    /// Edge idle time since the previous verdict (or decode start).
    pub bubble_ms: f64,
}

impl CycleRecord {
    pub fn committed(&self) -> usize {
        self.accepted + usize::from(self.corrected)
    }
}

/// A draft batch the edge finished generating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftRecord {
    pub batch_id: u32,
    pub start: f64,
    pub end: f64,
    pub tokens: usize,
}

/// One verification job on the cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub batch_id: u32,
    pub start: f64,
    pub end: f64,
    pub positions: usize,
    pub preverified: usize,
    pub t_pre_ms: f64,
}

/// Timestamped events of one run, merged from both actors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub decode_start: Option<f64>,
    pub cycles: Vec<CycleRecord>,
    pub drafts: Vec<DraftRecord>,
    pub verifies: Vec<VerifyRecord>,
    pub aborted_drafts: usize,
    pub truncations: usize,
    pub stale_batches: usize,
    pub stale_preverify: usize,
}

impl Trace {
    /// Intervals between consecutive verdicts, the first measured from
    /// decode start.
    pub fn cycle_times(&self) -> Vec<f64> {
        let mut prev = self.decode_start.unwrap_or(0.0);
        self.cycles
            .iter()
            .map(|c| {
                let dt = c.verdict_at - prev;
                prev = c.verdict_at;
                dt
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Tokens committed after the seed token.
    pub committed_tokens: usize,
    pub cycles: usize,
    /// From decode start to the last commit.
    pub total_time_ms: f64,
    pub throughput_tps: f64,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    /// Committed tokens per verification cycle (accepted drafts plus the
    /// correction on a rejection).
    pub mean_accept_len: f64,
    /// Accepted draft tokens per verification cycle.
    pub mean_accepted_drafts: f64,
    /// Mean verdict-to-verdict interval, excluding the first cycle.
    pub mean_cycle_ms: f64,
    pub t_draft_obs_ms: f64,
    pub t_verify_obs_ms: f64,
    pub t_pre_obs_ms: f64,
    pub bubble_total_ms: f64,
    pub bubble_mean_ms: f64,
    pub stale_batches: usize,
    pub stale_preverify: usize,
    pub truncations: usize,
    pub aborted_drafts: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn collect(trace: &Trace) -> Result<RunMetrics, MetricsError> {
    let start = trace.decode_start.ok_or(MetricsError::EmptyRun)?;
    let committing: Vec<&CycleRecord> = trace.cycles.iter().filter(|c| c.committed() > 0).collect();
    let (Some(first), Some(last)) = (committing.first(), committing.last()) else {
        return Err(MetricsError::EmptyRun);
    };
    let committed_tokens: usize = trace.cycles.iter().map(CycleRecord::committed).sum();
    let cycles = trace.cycles.len();
    let total_time_ms = last.verdict_at - start;
    let ttft_ms = first.verdict_at - start;
    let after_first = committed_tokens - first.committed();
    let tpot_ms = if after_first > 0 {
        (last.verdict_at - first.verdict_at) / after_first as f64
    } else {
        ttft_ms / first.committed() as f64
    };
    let mean_cycle_ms = if cycles > 1 {
        (trace.cycles[cycles - 1].verdict_at - trace.cycles[0].verdict_at) / (cycles - 1) as f64
    } else {
        total_time_ms
    };
    let bubble_total_ms: f64 = trace.cycles.iter().map(|c| c.bubble_ms).sum();
    Ok(RunMetrics {
        committed_tokens,
        cycles,
        total_time_ms,
        throughput_tps: committed_tokens as f64 / total_time_ms * 1000.0,
        ttft_ms,
        tpot_ms,
        mean_accept_len: committed_tokens as f64 / cycles as f64,
        mean_accepted_drafts: mean(trace.cycles.iter().map(|c| c.accepted as f64)),
        mean_cycle_ms,
        t_draft_obs_ms: mean(trace.drafts.iter().map(|d| d.end - d.start)),
        t_verify_obs_ms: mean(trace.verifies.iter().map(|v| v.end - v.start)),
        t_pre_obs_ms: mean(trace.verifies.iter().map(|v| v.t_pre_ms)),
        bubble_total_ms,
        bubble_mean_ms: bubble_total_ms / cycles as f64,
        stale_batches: trace.stale_batches,
        stale_preverify: trace.stale_preverify,
        truncations: trace.truncations,
        aborted_drafts: trace.aborted_drafts,
    })
}
