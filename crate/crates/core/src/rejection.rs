//! Speculative rejection sampling, split between edge and cloud.
//!
//! The edge drafts tokens from `Q` and uplinks only the chosen-token
//! probabilities `q_i`. The cloud runs the acceptance tests against its own
//! `P` and, on the first rejection at position `j`, returns a Top-K
//! compressed `P_j`. The edge then resamples locally from
//! `norm(max(0, P_j - Q_j))` restricted to the transmitted support.
//!
//! [`vanilla_step_reference`] is the dense single-site procedure used as the
//! losslessness oracle. Both routes consume randomness identically:
//!
//! * draft token at absolute position `p` uses draw `p` of `EdgeDraft`;
//! * acceptance tests consume `CloudAccept` sequentially;
//! * each correction consumes one sequential `EdgeResample` draw.

use thiserror::Error;

use crate::models::SequenceModel;
use crate::rng::{RandomStream, SessionStreams};
use crate::types::{inverse_cdf, DenseDistribution, SparseDistribution, TokenId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RejectionError {
    #[error("draft probability q = {0} must be > 0")]
    Domain(f32),
    #[error("batch base position {batch} does not match committed length {committed}")]
    StaleBatch { batch: usize, committed: usize },
    #[error("malformed draft batch: {0}")]
    MalformedBatch(&'static str),
}

/// A speculative segment drafted from a given base position.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftBatch {
    pub batch_id: u32,
    /// Sequence position of the first drafted token.
    pub base_pos: usize,
    pub tokens: Vec<TokenId>,
    /// `q_i = Q_i(tokens[i])`, bit-exact as computed by the edge.
    pub chosen_probs: Vec<f32>,
    pub truncated: bool,
}

impl DraftBatch {
    pub fn new(
        batch_id: u32,
        base_pos: usize,
        tokens: Vec<TokenId>,
        chosen_probs: Vec<f32>,
        truncated: bool,
    ) -> Result<Self, RejectionError> {
        if tokens.is_empty() {
            return Err(RejectionError::MalformedBatch("empty batch"));
        }
        if tokens.len() != chosen_probs.len() {
            return Err(RejectionError::MalformedBatch("token/probability count mismatch"));
        }
        if let Some(&q) = chosen_probs.iter().find(|&&q| !(q > 0.0)) {
            return Err(RejectionError::Domain(q));
        }
        Ok(Self { batch_id, base_pos, tokens, chosen_probs, truncated })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position one past the last drafted token.
    pub fn end_pos(&self) -> usize {
        self.base_pos + self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerdictKind {
    AllAccepted,
    Rejected { position: usize, sparse_target: SparseDistribution },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub batch_id: u32,
    pub accepted_count: usize,
    pub kind: VerdictKind,
}

impl Verdict {
    pub fn is_rejected(&self) -> bool {
        matches!(self.kind, VerdictKind::Rejected { .. })
    }
}

/// `u < min(1, p / q)`.
pub fn accept_test(p: f32, q: f32, u: f64) -> Result<bool, RejectionError> {
    if !(q > 0.0) {
        return Err(RejectionError::Domain(q));
    }
    let threshold = (p as f64 / q as f64).min(1.0);
    Ok(u < threshold)
}

/// The `k` most probable tokens with positive mass, sorted by probability
/// (ties: lower id first).
pub fn topk_compress(p: &DenseDistribution, k: usize) -> SparseDistribution {
    let mut entries: Vec<(TokenId, f32)> =
        p.probs().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (TokenId(i as u32), v)).collect();
    let by_rank = |a: &(TokenId, f32), b: &(TokenId, f32)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if entries.len() > k {
        entries.select_nth_unstable_by(k, by_rank);
        entries.truncate(k);
    }
    entries.sort_unstable_by(by_rank);
    SparseDistribution::new(entries).expect("top-k of a valid distribution is a valid sparse distribution")
}

/// Unnormalized residual `max(0, P(x) - Q(x))` over the sparse support, in
/// token-id order. Falls back to the sparse `P` itself when the residual has
/// no mass.
pub fn residual_weights(sparse_p: &SparseDistribution, q: &DenseDistribution) -> Vec<(TokenId, f64)> {
    let mut support: Vec<(TokenId, f32)> = sparse_p.entries().to_vec();
    support.sort_unstable_by_key(|e| e.0);
    let residual: Vec<(TokenId, f64)> =
        support.iter().map(|&(id, p)| (id, (p as f64 - q.prob(id) as f64).max(0.0))).collect();
    if residual.iter().any(|e| e.1 > 0.0) {
        residual
    } else {
        support.into_iter().map(|(id, p)| (id, p as f64)).collect()
    }
}

/// Samples the corrected token from the residual with one draw of `stream`.
pub fn residual_resample(sparse_p: &SparseDistribution, q: &DenseDistribution, stream: &mut RandomStream) -> TokenId {
    assert!(!sparse_p.is_empty(), "residual resampling needs a non-empty support");
    let weights = residual_weights(sparse_p, q);
    let w: Vec<f64> = weights.iter().map(|e| e.1).collect();
    let u = stream.draw_uniform();
    let idx = inverse_cdf(&w, u).expect("residual support has positive mass");
    weights[idx].0
}

fn tail(context: &[TokenId], order: usize) -> Vec<TokenId> {
    context[context.len().saturating_sub(order)..].to_vec()
}

/// Cloud-side verification of one batch against the committed context.
///
/// Acceptance tests run position by position; the stream advances
/// `accepted_count + 1` draws on rejection and `len` draws on full
/// acceptance.
pub fn cloud_verify(
    batch: &DraftBatch,
    target: &dyn SequenceModel,
    committed: &[TokenId],
    top_k: usize,
    accept_stream: &mut RandomStream,
) -> Result<Verdict, RejectionError> {
    if batch.base_pos != committed.len() {
        return Err(RejectionError::StaleBatch { batch: batch.base_pos, committed: committed.len() });
    }
    let order = target.order();
    let mut ctx = tail(committed, order);
    for (j, (&x, &q)) in batch.tokens.iter().zip(&batch.chosen_probs).enumerate() {
        let p = target.next_distribution(&ctx);
        let u = accept_stream.draw_uniform();
        if !accept_test(p.prob(x), q, u)? {
            return Ok(Verdict {
                batch_id: batch.batch_id,
                accepted_count: j,
                kind: VerdictKind::Rejected { position: j, sparse_target: topk_compress(p, top_k) },
            });
        }
        ctx.push(x);
    }
    Ok(Verdict { batch_id: batch.batch_id, accepted_count: batch.len(), kind: VerdictKind::AllAccepted })
}

/// First generated token: sampled by the cloud from the target at the end
/// of the prompt with one `CloudAccept` draw.
pub fn sample_seed_token(target: &dyn SequenceModel, prompt: &[TokenId], accept_stream: &mut RandomStream) -> TokenId {
    target.next_distribution(&tail(prompt, target.order())).sample(accept_stream.draw_uniform())
}

/// Draft token at absolute position `pos`.
pub fn draft_token(q: &DenseDistribution, pos: usize, draft_stream: &mut RandomStream) -> TokenId {
    q.sample(draft_stream.draw_at(pos as u64))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VanillaStep {
    pub accepted: Vec<TokenId>,
    pub corrected: Option<TokenId>,
}

/// One step of dense, single-site speculative sampling: draft up to `gamma`
/// tokens after `context`, test them in order, and on the first rejection
/// resample from `norm(max(0, P - Q))` over the whole vocabulary. No extra
/// token is sampled when every draft is accepted.
pub fn vanilla_step_reference(
    draft: &dyn SequenceModel,
    target: &dyn SequenceModel,
    context: &[TokenId],
    gamma: usize,
    streams: &mut SessionStreams,
) -> VanillaStep {
    let mut seq = context.to_vec();
    let mut accepted = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let q = draft.next_distribution(&tail(&seq, draft.order()));
        let x = draft_token(q, seq.len(), &mut streams.edge_draft);
        let p = target.next_distribution(&tail(&seq, target.order()));
        let px = p.prob(x) as f64;
        let qx = q.prob(x) as f64;
        let u = streams.cloud_accept.draw_uniform();
        if u < (px / qx).min(1.0) {
            accepted.push(x);
            seq.push(x);
            continue;
        }
        let mut weights: Vec<f64> =
            p.probs().iter().zip(q.probs()).map(|(&a, &b)| (a as f64 - b as f64).max(0.0)).collect();
        if weights.iter().all(|&w| w == 0.0) {
            weights = p.probs().iter().map(|&a| a as f64).collect();
        }
        let y = inverse_cdf(&weights, streams.edge_resample.draw_uniform()).expect("target distribution has mass");
        return VanillaStep { accepted, corrected: Some(TokenId(y as u32)) };
    }
    VanillaStep { accepted, corrected: None }
}

/// Full reference generation: seed token, then vanilla steps until at least
/// `max_tokens` tokens have been generated. Returns generated tokens only.
pub fn reference_transcript(
    draft: &dyn SequenceModel,
    target: &dyn SequenceModel,
    prompt: &[TokenId],
    gamma: usize,
    seed: u64,
    max_tokens: usize,
) -> Vec<TokenId> {
    let mut streams = SessionStreams::new(seed);
    let mut seq = prompt.to_vec();
    seq.push(sample_seed_token(target, prompt, &mut streams.cloud_accept));
    while seq.len() - prompt.len() < max_tokens {
        let step = vanilla_step_reference(draft, target, &seq, gamma, &mut streams);
        seq.extend(step.accepted);
        seq.extend(step.corrected);
    }
    seq.split_off(prompt.len())
}

/// Exact single-step committed-token distribution of the split scheme with
/// Top-K compression of `P`: `min(P, Q) + rejection_mass * r_K`.
pub fn committed_distribution(p: &DenseDistribution, q: &DenseDistribution, top_k: usize) -> Vec<f64> {
    let mut out: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(&a, &b)| (a as f64).min(b as f64)).collect();
    let rejection_mass: f64 = q
        .probs()
        .iter()
        .zip(p.probs())
        .filter(|(&qx, _)| qx > 0.0)
        .map(|(&qx, &px)| qx as f64 * (1.0 - (px as f64 / qx as f64).min(1.0)))
        .sum();
    if rejection_mass > 0.0 {
        let weights = residual_weights(&topk_compress(p, top_k), q);
        let total: f64 = weights.iter().map(|e| e.1).sum();
        for (id, w) in weights {
            out[id.index()] += rejection_mass * w / total;
        }
    }
    out
}

/// Total-variation distance between the Top-K scheme's committed-token
/// distribution and `P`.
pub fn topk_tv_distance(p: &DenseDistribution, q: &DenseDistribution, top_k: usize) -> f64 {
    committed_distribution(p, q, top_k).iter().zip(p.probs()).map(|(a, &b)| (a - b as f64).abs()).sum::<f64>() / 2.0
}
