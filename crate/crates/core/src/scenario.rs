//! Scenario files and the experiments built on them.
//!
//! A scenario pins models, costs, session parameters, channel, mode and run
//! length. Files are JSON; unknown keys are rejected.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{self, PerfParams};
use crate::metrics::RunMetrics;
use crate::models::{
    exact_alpha, make_aligned_pair, make_constant_alpha_pair, AlignedPair, ModelError, SequenceModel, TableModel,
    TableModelSpec,
};
use crate::pipeline::{self, CostSpike, PipelineError, PipelineMode, PipelineSetup, RunOutcome, TruncationPolicy};
use crate::rejection::topk_tv_distance;
use crate::transport::ChannelConfig;
use crate::types::{SessionConfig, TokenId};
use crate::wire::{frame_size_model, FrameKind};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid scenario JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
}

/// How the draft/target pair is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Random target of the given Markov order; the draft mixes it with
    /// noise by `lambda`.
    Aligned {
        vocab_size: usize,
        order: usize,
        lambda: f64,
        seed: u64,
    },
    /// Order-1 pair with per-token acceptance probability exactly `alpha`.
    ConstantAlpha {
        vocab_size: usize,
        alpha: f64,
    },
    Explicit {
        target: TableModelSpec,
        draft: TableModelSpec,
    },
}

impl ModelSpec {
    pub fn vocab_size(&self) -> usize {
        match self {
            ModelSpec::Aligned { vocab_size, .. } | ModelSpec::ConstantAlpha { vocab_size, .. } => *vocab_size,
            ModelSpec::Explicit { target, .. } => target.vocab_size,
        }
    }

    pub fn build(&self) -> Result<AlignedPair, ModelError> {
        match self {
            ModelSpec::Aligned { vocab_size, order, lambda, seed } => {
                make_aligned_pair(*vocab_size, *order, *lambda, *seed)
            }
            ModelSpec::ConstantAlpha { vocab_size, alpha } => make_constant_alpha_pair(*vocab_size, *alpha),
            ModelSpec::Explicit { target, draft } => Ok(AlignedPair {
                target: TableModel::try_from(target)?,
                draft: TableModel::try_from(draft)?,
                lambda: f64::NAN,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub draft_token_ms: f64,
    pub verify_token_ms: f64,
}

fn default_mode() -> PipelineMode {
    PipelineMode::Async
}

fn default_prompt() -> Vec<u32> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub model: ModelSpec,
    pub costs: CostConfig,
    pub session: SessionConfig,
    pub channel: ChannelConfig,
    #[serde(default = "default_mode")]
    pub mode: PipelineMode,
    pub max_tokens: usize,
    #[serde(default = "default_prompt")]
    pub prompt: Vec<u32>,
    #[serde(default)]
    pub prefill_ms: f64,
    #[serde(default)]
    pub truncation: Option<TruncationPolicy>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cost_spikes: Vec<CostSpike>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        self.session.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.channel.validate().map_err(ScenarioError::Invalid)?;
        if self.model.vocab_size() != self.session.vocab_size {
            return bad(format!(
                "model vocab_size {} differs from session vocab_size {}",
                self.model.vocab_size(),
                self.session.vocab_size
            ));
        }
        for (name, v) in
            [("draft_token_ms", self.costs.draft_token_ms), ("verify_token_ms", self.costs.verify_token_ms)]
        {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} {v} must be a finite value >= 0"));
            }
        }
        if self.max_tokens < 1 {
            return bad("max_tokens must be >= 1".into());
        }
        if self.prompt.is_empty() {
            return bad("prompt must hold at least one token".into());
        }
        if let Some(t) = self.prompt.iter().find(|&&t| t as usize >= self.session.vocab_size) {
            return bad(format!("prompt token {t} outside the vocabulary"));
        }
        if let Some(t) = &self.truncation {
            t.validate().map_err(ScenarioError::Invalid)?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding; both socket ends compare it.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("scenario serializes")).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    /// Builds the pipeline inputs, generating the models.
    pub fn setup(&self) -> Result<PipelineSetup, ScenarioError> {
        let pair = self.model.build()?;
        Ok(self.setup_from_pair(&pair))
    }

    fn setup_from_pair(&self, pair: &AlignedPair) -> PipelineSetup {
        PipelineSetup {
            draft: Arc::new(pair.draft.clone().with_token_cost(self.costs.draft_token_ms)),
            target: Arc::new(pair.target.clone().with_token_cost(self.costs.verify_token_ms)),
            session: self.session,
            channel: self.channel,
            mode: self.mode,
            max_tokens: self.max_tokens,
            prompt: self.prompt.iter().map(|&t| TokenId(t)).collect(),
            prefill_ms: self.prefill_ms,
            truncation: self.truncation,
            cost_spikes: self.cost_spikes.clone(),
        }
    }

    pub fn run(&self) -> Result<RunOutcome, ScenarioError> {
        Ok(pipeline::run(&self.setup()?)?)
    }

    /// Round trip predicted for one hit cycle: twice the latency plus the
    /// transmission of a full Draft frame and an all-accepted Verdict.
    pub fn predicted_rtt_ms(&self) -> f64 {
        let g = self.session.gamma as u64;
        let mut up = frame_size_model(FrameKind::Draft, g) as usize;
        if !self.mode.split_rejection() {
            up += self.session.gamma * self.session.vocab_size * 4;
        }
        let down = frame_size_model(FrameKind::Verdict, 0) as usize;
        2.0 * self.channel.one_way_latency_ms + self.channel.transmission_ms(up) + self.channel.transmission_ms(down)
    }

    pub fn perf_params(&self, alpha: f64) -> PerfParams {
        let g = self.session.gamma as f64;
        PerfParams {
            alpha,
            gamma: self.session.gamma,
            t_draft: g * self.costs.draft_token_ms,
            t_verify: g * self.costs.verify_token_ms,
            t_rtt: self.predicted_rtt_ms(),
            t_pre: 0.0,
        }
    }

    /// Per-token acceptance probability of the pair: exact for
    /// constant-alpha models, averaged uniformly over contexts otherwise.
    pub fn model_alpha(&self, pair: &AlignedPair) -> f64 {
        match self.model {
            ModelSpec::ConstantAlpha { alpha, .. } => alpha,
            _ => exact_alpha(pair),
        }
    }

    /// Mean Top-K total-variation distance over the pair's contexts.
    pub fn mean_tv_distance(&self, pair: &AlignedPair) -> f64 {
        let k = if self.mode.split_rejection() { self.session.top_k } else { self.session.vocab_size };
        let rows: Vec<f64> =
            pair.draft.rows().map(|(ctx, q)| topk_tv_distance(pair.target.next_distribution(ctx), q, k)).collect();
        if rows.is_empty() {
            topk_tv_distance(pair.target.default_row(), pair.draft.default_row(), k)
        } else {
            rows.iter().sum::<f64>() / rows.len() as f64
        }
    }
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepDim {
    Gamma,
    TopK,
    /// Round-trip time; sets the one-way latency to half the value.
    Rtt,
    /// Draft alignment `lambda`, or `alpha` for constant-alpha models.
    Lambda,
}

impl SweepDim {
    pub fn name(self) -> &'static str {
        match self {
            SweepDim::Gamma => "gamma",
            SweepDim::TopK => "K",
            SweepDim::Rtt => "rtt",
            SweepDim::Lambda => "lambda",
        }
    }
}

impl fmt::Display for SweepDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepDim {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gamma" => Ok(SweepDim::Gamma),
            "K" | "k" => Ok(SweepDim::TopK),
            "rtt" => Ok(SweepDim::Rtt),
            "lambda" => Ok(SweepDim::Lambda),
            other => Err(format!("unknown sweep dimension {other:?} (expected gamma, K, rtt or lambda)")),
        }
    }
}

impl ScenarioConfig {
    /// Copy of the scenario with `dim` set to `value`.
    pub fn with_value(&self, dim: SweepDim, value: f64) -> Result<Self, ScenarioError> {
        let mut cfg = self.clone();
        let as_count = |v: f64| -> Result<usize, ScenarioError> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(ScenarioError::Invalid(format!("{dim} value {v} must be a positive integer")))
            }
        };
        match dim {
            SweepDim::Gamma => cfg.session.gamma = as_count(value)?,
            SweepDim::TopK => cfg.session.top_k = as_count(value)?,
            SweepDim::Rtt => cfg.channel.one_way_latency_ms = value / 2.0,
            SweepDim::Lambda => match &mut cfg.model {
                ModelSpec::Aligned { lambda, .. } => *lambda = value,
                ModelSpec::ConstantAlpha { alpha, .. } => *alpha = value,
                ModelSpec::Explicit { .. } => {
                    return Err(ScenarioError::Invalid("lambda sweeps need a generated model".into()))
                }
            },
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One CSV row: measured metrics next to the closed-form predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dim: String,
    pub value: String,
    pub mode: String,
    pub committed_tokens: usize,
    pub cycles: usize,
    pub throughput_tps: f64,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub mean_accept_len: f64,
    pub mean_accepted_drafts: f64,
    pub mean_cycle_ms: f64,
    pub t_draft_obs_ms: f64,
    pub t_verify_obs_ms: f64,
    pub t_pre_obs_ms: f64,
    pub bubble_mean_ms: f64,
    pub stale_batches: usize,
    pub stale_preverify: usize,
    pub truncations: usize,
    pub alpha: f64,
    pub pred_accept_len: f64,
    pub pred_cycle_ms: f64,
    pub pred_throughput_tps: f64,
    pub pred_speedup: f64,
    pub speedup_limit: f64,
    pub pred_bubble_ms: f64,
    pub tv_distance: f64,
}

/// Column names of [`ReportRow`], in CSV order.
pub const REPORT_COLUMNS: [&str; 26] = [
    "dim",
    "value",
    "mode",
    "committed_tokens",
    "cycles",
    "throughput_tps",
    "ttft_ms",
    "tpot_ms",
    "mean_accept_len",
    "mean_accepted_drafts",
    "mean_cycle_ms",
    "t_draft_obs_ms",
    "t_verify_obs_ms",
    "t_pre_obs_ms",
    "bubble_mean_ms",
    "stale_batches",
    "stale_preverify",
    "truncations",
    "alpha",
    "pred_accept_len",
    "pred_cycle_ms",
    "pred_throughput_tps",
    "pred_speedup",
    "speedup_limit",
    "pred_bubble_ms",
    "tv_distance",
];

fn report_row(cfg: &ScenarioConfig, pair: &AlignedPair, dim: &str, value: String, m: &RunMetrics) -> ReportRow {
    let alpha = cfg.model_alpha(pair);
    let p = cfg.perf_params(alpha);
    let el = analytics::expected_accept_length(alpha, p.gamma);
    let pred_cycle_ms = if cfg.mode.pipelined() {
        analytics::async_expected_latency(&p)
    } else {
        analytics::sync_latency(p.t_draft, p.t_rtt, p.t_verify)
    };
    let pred_bubble_ms = if cfg.mode.pipelined() {
        analytics::bubble_time(p.t_rtt, p.t_verify, p.t_draft, p.t_pre)
    } else {
        p.t_rtt + p.t_verify
    };
    ReportRow {
        dim: dim.to_string(),
        value,
        mode: cfg.mode.name().to_string(),
        committed_tokens: m.committed_tokens,
        cycles: m.cycles,
        throughput_tps: m.throughput_tps,
        ttft_ms: m.ttft_ms,
        tpot_ms: m.tpot_ms,
        mean_accept_len: m.mean_accept_len,
        mean_accepted_drafts: m.mean_accepted_drafts,
        mean_cycle_ms: m.mean_cycle_ms,
        t_draft_obs_ms: m.t_draft_obs_ms,
        t_verify_obs_ms: m.t_verify_obs_ms,
        t_pre_obs_ms: m.t_pre_obs_ms,
        bubble_mean_ms: m.bubble_mean_ms,
        stale_batches: m.stale_batches,
        stale_preverify: m.stale_preverify,
        truncations: m.truncations,
        alpha,
        pred_accept_len: el,
        pred_cycle_ms,
        pred_throughput_tps: el / pred_cycle_ms * 1000.0,
        pred_speedup: if cfg.mode.pipelined() { analytics::speedup(&p) } else { 1.0 },
        speedup_limit: analytics::speedup_limit(&p),
        pred_bubble_ms,
        tv_distance: cfg.mean_tv_distance(pair),
    }
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Runs the scenario once per value of `dim`.
pub fn sweep(cfg: &ScenarioConfig, dim: SweepDim, values: &[f64]) -> Result<Vec<ReportRow>, ScenarioError> {
    if values.len() < 2 {
        return Err(ScenarioError::Invalid("a sweep needs at least two values".into()));
    }
    values
        .iter()
        .map(|&v| {
            let c = cfg.with_value(dim, v)?;
            let pair = c.model.build()?;
            let out = pipeline::run(&c.setup_from_pair(&pair))?;
            Ok(report_row(&c, &pair, dim.name(), format_value(v), &out.metrics))
        })
        .collect()
}

/// Runs the scenario in every mode, full pipeline first.
pub fn compare(cfg: &ScenarioConfig) -> Result<Vec<ReportRow>, ScenarioError> {
    let pair = cfg.model.build()?;
    PipelineMode::ALL
        .iter()
        .map(|&mode| {
            let c = ScenarioConfig { mode, ..cfg.clone() };
            let out = pipeline::run(&c.setup_from_pair(&pair))?;
            Ok(report_row(&c, &pair, "mode", mode.name().to_string(), &out.metrics))
        })
        .collect()
}

/// Single-run report row.
pub fn report(cfg: &ScenarioConfig, out: &RunOutcome) -> Result<ReportRow, ScenarioError> {
    let pair = cfg.model.build()?;
    Ok(report_row(cfg, &pair, "run", String::new(), &out.metrics))
}

pub fn write_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<(), ScenarioError> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(REPORT_COLUMNS)?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| ScenarioError::Csv(e.into()))?;
    Ok(())
}

/// Transcript file: a `# digest <hex>` header, then one token id per line.
pub fn write_transcript<W: Write>(mut w: W, digest_hex: &str, tokens: &[TokenId]) -> std::io::Result<()> {
    writeln!(w, "# digest {digest_hex}")?;
    for t in tokens {
        writeln!(w, "{t}")?;
    }
    Ok(())
}
