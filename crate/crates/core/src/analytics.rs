//! Closed-form performance model of the synchronous and pipelined protocols.
//!
//! All times are milliseconds; throughputs are tokens per millisecond.

use serde::{Deserialize, Serialize};

/// Below this distance from 1 the acceptance length uses its limit value.
pub const ALPHA_ONE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfParams {
    pub alpha: f64,
    pub gamma: usize,
    pub t_draft: f64,
    pub t_verify: f64,
    pub t_rtt: f64,
    #[serde(default)]
    pub t_pre: f64,
}

impl PerfParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        if self.gamma < 1 {
            return Err("gamma must be >= 1".into());
        }
        for (name, v) in
            [("t_draft", self.t_draft), ("t_verify", self.t_verify), ("t_rtt", self.t_rtt), ("t_pre", self.t_pre)]
        {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(format!("{name} {v} must be a finite value >= 0"));
            }
        }
        Ok(())
    }

    /// Probability that a whole batch is accepted, `alpha^gamma`.
    pub fn p_hit(&self) -> f64 {
        self.alpha.powi(self.gamma as i32)
    }
}

/// Expected tokens committed per verification cycle, `(1 - a^g) / (1 - a)`.
pub fn expected_accept_length(alpha: f64, gamma: usize) -> f64 {
    if alpha >= 1.0 - ALPHA_ONE_EPS {
        return gamma as f64;
    }
    (1.0 - alpha.powi(gamma as i32)) / (1.0 - alpha)
}

pub fn sync_latency(t_draft: f64, t_rtt: f64, t_verify: f64) -> f64 {
    t_draft + t_rtt + t_verify
}

pub fn sync_throughput(p: &PerfParams) -> f64 {
    expected_accept_length(p.alpha, p.gamma) / sync_latency(p.t_draft, p.t_rtt, p.t_verify)
}

/// Steady-state cycle time when every batch is accepted.
pub fn full_hit_latency(t_draft: f64, t_rtt: f64, t_verify: f64) -> f64 {
    t_draft.max(t_rtt + t_verify)
}

/// Expected amortized time per cycle of the pipelined protocol: a hit costs
/// the overlapped cycle, a miss the full synchronous cycle.
pub fn async_expected_latency(p: &PerfParams) -> f64 {
    let hit = p.p_hit();
    hit * full_hit_latency(p.t_draft, p.t_rtt, p.t_verify) + (1.0 - hit) * sync_latency(p.t_draft, p.t_rtt, p.t_verify)
}

pub fn async_throughput(p: &PerfParams) -> f64 {
    expected_accept_length(p.alpha, p.gamma) / async_expected_latency(p)
}

/// `R_async / R_sync`.
pub fn speedup(p: &PerfParams) -> f64 {
    sync_latency(p.t_draft, p.t_rtt, p.t_verify) / async_expected_latency(p)
}

/// Upper bound of the speedup, reached at full acceptance in the
/// compute-bound regime: `1 + (T_rtt + T_verify) / T_draft`.
pub fn speedup_limit(p: &PerfParams) -> f64 {
    1.0 + (p.t_rtt + p.t_verify) / p.t_draft
}

/// Edge idle time per cycle, `max(0, T_rtt + T_verify - T_draft - T_pre)`.
pub fn bubble_time(t_rtt: f64, t_verify: f64, t_draft: f64, t_pre: f64) -> f64 {
    (t_rtt + t_verify - t_draft - t_pre).max(0.0)
}

/// Every model quantity for one parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Analysis {
    pub expected_accept_length: f64,
    pub sync_latency_ms: f64,
    pub sync_throughput_tps: f64,
    pub async_latency_ms: f64,
    pub async_throughput_tps: f64,
    pub speedup: f64,
    pub speedup_limit: f64,
    pub bubble_ms: f64,
    pub at_limit: bool,
}

pub fn analyze(p: &PerfParams) -> Analysis {
    let s = speedup(p);
    let limit = speedup_limit(p);
    Analysis {
        expected_accept_length: expected_accept_length(p.alpha, p.gamma),
        sync_latency_ms: sync_latency(p.t_draft, p.t_rtt, p.t_verify),
        sync_throughput_tps: sync_throughput(p) * 1000.0,
        async_latency_ms: async_expected_latency(p),
        async_throughput_tps: async_throughput(p) * 1000.0,
        speedup: s,
        speedup_limit: limit,
        bubble_ms: bubble_time(p.t_rtt, p.t_verify, p.t_draft, p.t_pre),
        at_limit: (s - limit).abs() <= 1e-12 * limit,
    }
}
