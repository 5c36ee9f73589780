//! Toy Markov sequence models standing in for the edge draft model and the
//! cloud target model.
//!
//! A [`TableModel`] maps the last `order` tokens of the context to an explicit
//! distribution; unseen contexts fall back to a default (uniform unless set).
//! [`AlignedPair`] builds a draft model as a mixture of the target and noise,
//! which is how scenarios dial in an acceptance rate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{DenseDistribution, ProbError, TokenId};

/// Upper bound on enumerated contexts (`vocab^order`) for generated tables.
pub const MAX_GENERATED_ROWS: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid row for context {context:?}: {source}")]
    Row { context: Vec<u32>, source: ProbError },
    #[error("context {context:?} has length {len}, model order is {order}")]
    ContextLength { context: Vec<u32>, len: usize, order: usize },
    #[error("token {0} outside vocabulary")]
    OutOfVocab(u32),
    #[error("{0}")]
    Invalid(String),
}

pub trait SequenceModel: Send + Sync {
    fn vocab_size(&self) -> usize;
    /// Number of trailing context tokens the model conditions on.
    fn order(&self) -> usize;
    /// Simulated forward cost of one token, in virtual milliseconds.
    fn token_cost_ms(&self) -> f64;
    fn next_distribution(&self, context: &[TokenId]) -> &DenseDistribution;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    vocab: usize,
    order: usize,
    rows: BTreeMap<Vec<TokenId>, DenseDistribution>,
    default: DenseDistribution,
    token_cost_ms: f64,
}

impl TableModel {
    pub fn new(vocab: usize, order: usize) -> Self {
        Self { vocab, order, rows: BTreeMap::new(), default: DenseDistribution::uniform(vocab), token_cost_ms: 0.0 }
    }

    pub fn with_token_cost(mut self, ms: f64) -> Self {
        self.token_cost_ms = ms;
        self
    }

    pub fn set_token_cost(&mut self, ms: f64) {
        self.token_cost_ms = ms;
    }

    pub fn with_default(mut self, default: DenseDistribution) -> Result<Self, ModelError> {
        if default.vocab_size() != self.vocab {
            return Err(ModelError::Invalid("default row has wrong length".into()));
        }
        self.default = default;
        Ok(self)
    }

    pub fn insert_row(&mut self, context: Vec<TokenId>, row: DenseDistribution) -> Result<(), ModelError> {
        let raw: Vec<u32> = context.iter().map(|t| t.0).collect();
        if context.len() != self.order {
            return Err(ModelError::ContextLength { len: context.len(), order: self.order, context: raw });
        }
        if let Some(t) = context.iter().find(|t| t.index() >= self.vocab) {
            return Err(ModelError::OutOfVocab(t.0));
        }
        if row.vocab_size() != self.vocab {
            return Err(ModelError::Row {
                context: raw,
                source: ProbError::WrongLength { expected: self.vocab, got: row.vocab_size() },
            });
        }
        self.rows.insert(context, row);
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[TokenId], &DenseDistribution)> {
        self.rows.iter().map(|(k, v)| (k.as_slice(), v))
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn default_row(&self) -> &DenseDistribution {
        &self.default
    }
}

impl SequenceModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn order(&self) -> usize {
        self.order
    }

    fn token_cost_ms(&self) -> f64 {
        self.token_cost_ms
    }

    fn next_distribution(&self, context: &[TokenId]) -> &DenseDistribution {
        if context.len() < self.order {
            return &self.default;
        }
        let key = &context[context.len() - self.order..];
        self.rows.get(key).unwrap_or(&self.default)
    }
}

/// JSON form of a [`TableModel`]: explicit rows, row-major probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableModelSpec {
    pub vocab_size: usize,
    pub order: usize,
    pub rows: Vec<RowSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSpec {
    pub context: Vec<u32>,
    pub probs: Vec<f32>,
}

impl TryFrom<&TableModelSpec> for TableModel {
    type Error = ModelError;

    fn try_from(spec: &TableModelSpec) -> Result<Self, ModelError> {
        if spec.vocab_size < 2 {
            return Err(ModelError::Invalid(format!("vocab_size {} < 2", spec.vocab_size)));
        }
        let mut model = TableModel::new(spec.vocab_size, spec.order);
        if let Some(d) = &spec.default {
            let row = DenseDistribution::with_vocab(d.clone(), spec.vocab_size)
                .map_err(|source| ModelError::Row { context: vec![], source })?;
            model = model.with_default(row)?;
        }
        for row in &spec.rows {
            let dist = DenseDistribution::with_vocab(row.probs.clone(), spec.vocab_size)
                .map_err(|source| ModelError::Row { context: row.context.clone(), source })?;
            model.insert_row(row.context.iter().map(|&t| TokenId(t)).collect(), dist)?;
        }
        Ok(model)
    }
}

impl From<&TableModel> for TableModelSpec {
    fn from(model: &TableModel) -> Self {
        let uniform = DenseDistribution::uniform(model.vocab);
        Self {
            vocab_size: model.vocab,
            order: model.order,
            rows: model
                .rows
                .iter()
                .map(|(ctx, row)| RowSpec { context: ctx.iter().map(|t| t.0).collect(), probs: row.probs().to_vec() })
                .collect(),
            default: (model.default != uniform).then(|| model.default.probs().to_vec()),
        }
    }
}

/// Target model plus a draft model mixed from it.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub target: TableModel,
    pub draft: TableModel,
    pub lambda: f64,
}

fn all_contexts(vocab: usize, order: usize) -> Result<Vec<Vec<TokenId>>, ModelError> {
    let count = (vocab as u128).checked_pow(order as u32).unwrap_or(u128::MAX);
    if count > MAX_GENERATED_ROWS as u128 {
        return Err(ModelError::Invalid(format!("vocab^order = {count} contexts exceeds {MAX_GENERATED_ROWS}")));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut ctx = vec![0u32; order];
    for _ in 0..count {
        out.push(ctx.iter().map(|&t| TokenId(t)).collect());
        for slot in ctx.iter_mut().rev() {
            *slot += 1;
            if (*slot as usize) < vocab {
                break;
            }
            *slot = 0;
        }
    }
    Ok(out)
}

/// Builds a random target table and a draft table
/// `lambda * target + (1 - lambda) * noise`, where noise rows are
/// independent normalized uniform weights. Deterministic in `seed`.
pub fn make_aligned_pair(vocab: usize, order: usize, lambda: f64, seed: u64) -> Result<AlignedPair, ModelError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ModelError::Invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    if vocab < 2 {
        return Err(ModelError::Invalid(format!("vocab_size {vocab} < 2")));
    }
    let contexts = all_contexts(vocab, order)?;
    let mut target_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut target = TableModel::new(vocab, order);
    let mut draft = TableModel::new(vocab, order);
    for ctx in contexts {
        // Peaked rows: exp(2 z), z ~ N(0, 1).
        let logits: Vec<f64> = (0..vocab).map(|_| (2.0 * target_rng.sample::<f64, _>(StandardNormal)).exp()).collect();
        let p =
            DenseDistribution::from_weights(&logits).map_err(|source| ModelError::Row { context: vec![], source })?;
        let noise: Vec<f64> = (0..vocab).map(|_| noise_rng.random::<f64>()).collect();
        let q = if lambda == 1.0 {
            p.clone()
        } else {
            let noise_total: f64 = noise.iter().sum();
            let mixed: Vec<f64> = p
                .probs()
                .iter()
                .zip(&noise)
                .map(|(&pt, &n)| lambda * pt as f64 + (1.0 - lambda) * n / noise_total)
                .collect();
            DenseDistribution::from_weights(&mixed).map_err(|source| ModelError::Row { context: vec![], source })?
        };
        target.insert_row(ctx.clone(), p)?;
        draft.insert_row(ctx, q)?;
    }
    Ok(AlignedPair { target, draft, lambda })
}

/// Order-1 pair whose per-token acceptance probability is `alpha` for every
/// token the draft can emit: the draft puts 1/2 on tokens `c` and `c+1`
/// (mod V) after context `c`, the target puts `alpha/2` on each of those and
/// spreads the rest over the other `V - 2` tokens.
pub fn make_constant_alpha_pair(vocab: usize, alpha: f64) -> Result<AlignedPair, ModelError> {
    if vocab < 3 {
        return Err(ModelError::Invalid("constant-alpha pair needs vocab >= 3".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ModelError::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut target = TableModel::new(vocab, 1);
    let mut draft = TableModel::new(vocab, 1);
    let rest = (1.0 - alpha) / (vocab - 2) as f64;
    for c in 0..vocab {
        let a = c;
        let b = (c + 1) % vocab;
        let mut q = vec![0.0f32; vocab];
        q[a] = 0.5;
        q[b] = 0.5;
        let p: Vec<f32> =
            (0..vocab).map(|t| if t == a || t == b { (alpha / 2.0) as f32 } else { rest as f32 }).collect();
        let ctx = vec![TokenId(c as u32)];
        let row = |v: Vec<f32>| {
            DenseDistribution::new(v).map_err(|source| ModelError::Row { context: vec![c as u32], source })
        };
        target.insert_row(ctx.clone(), row(p)?)?;
        draft.insert_row(ctx, row(q)?)?;
    }
    Ok(AlignedPair { target, draft, lambda: alpha })
}

/// Expected acceptance probability averaged uniformly over the table's
/// contexts: `mean_c sum_x min(P(x|c), Q(x|c))`.
pub fn exact_alpha(pair: &AlignedPair) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (ctx, q) in pair.draft.rows() {
        let p = pair.target.next_distribution(ctx);
        total += p.probs().iter().zip(q.probs()).map(|(&a, &b)| (a as f64).min(b as f64)).sum::<f64>();
        n += 1;
    }
    if n == 0 {
        let p = pair.target.default_row();
        let q = pair.draft.default_row();
        return p.probs().iter().zip(q.probs()).map(|(&a, &b)| (a as f64).min(b as f64)).sum();
    }
    total / n as f64
}

/// Monte Carlo acceptance rate: context uniform over the table rows,
/// `x ~ Q(.|c)`, average of `min(1, P(x|c) / Q(x|c))`.
pub fn measure_alpha(pair: &AlignedPair, n_samples: usize, seed: u64) -> f64 {
    assert!(n_samples >= 1, "n_samples must be >= 1");
    let contexts: Vec<&[TokenId]> = pair.draft.rows().map(|(c, _)| c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let (q, p) = if contexts.is_empty() {
            (pair.draft.default_row(), pair.target.default_row())
        } else {
            let ctx = contexts[rng.random_range(0..contexts.len())];
            (pair.draft.next_distribution(ctx), pair.target.next_distribution(ctx))
        };
        let x = q.sample(rng.random::<f64>());
        let ratio = p.prob(x) as f64 / q.prob(x) as f64;
        acc += ratio.min(1.0);
    }
    acc / n_samples as f64
}
