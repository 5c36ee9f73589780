//! Shared domain types: token ids, validated probability containers and the
//! per-session configuration.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|sum - 1|` accepted by [`DenseDistribution`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Largest vocabulary representable on the wire (16-bit token ids).
pub const MAX_VOCAB: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbError {
    #[error("distribution has {got} entries, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("negative or non-finite mass {value} at index {index}")]
    NegativeMass { index: usize, value: f32 },
    #[error("distribution sums to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("sparse entry {index} is not strictly positive")]
    NonPositive { index: usize },
    #[error("sparse entries are not sorted by non-increasing probability (tie: lower id first)")]
    Unsorted,
    #[error("duplicate token id {0} in sparse distribution")]
    DuplicateId(TokenId),
    #[error("sparse mass {sum} exceeds 1")]
    MassExceeded { sum: f64 },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: TokenId, vocab: usize },
}

/// A token id. Always interpreted against a session vocabulary size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

/// Full next-token distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDistribution {
    probs: Vec<f32>,
}

impl DenseDistribution {
    /// Validates a raw probability vector: every entry finite and `>= 0`,
    /// total within [`NORMALIZATION_TOLERANCE`] of one.
    pub fn new(probs: Vec<f32>) -> Result<Self, ProbError> {
        let mut sum = 0.0f64;
        for (index, &value) in probs.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(ProbError::NegativeMass { index, value });
            }
            sum += value as f64;
        }
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(ProbError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    /// Validates and additionally checks the length against `vocab`.
    pub fn with_vocab(probs: Vec<f32>, vocab: usize) -> Result<Self, ProbError> {
        if probs.len() != vocab {
            return Err(ProbError::WrongLength { expected: vocab, got: probs.len() });
        }
        Self::new(probs)
    }

    /// Normalizes non-negative weights (computed in f64) into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self, ProbError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(ProbError::NotNormalized { sum: total });
        }
        Self::new(weights.iter().map(|w| (w / total) as f32).collect())
    }

    pub fn uniform(vocab: usize) -> Self {
        Self { probs: vec![1.0 / vocab as f32; vocab] }
    }

    pub fn point_mass(vocab: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; vocab];
        probs[token.index()] = 1.0;
        Self { probs }
    }

    #[inline]
    pub fn prob(&self, token: TokenId) -> f32 {
        self.probs.get(token.index()).copied().unwrap_or(0.0)
    }

    #[inline]
    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }
}

/// Inverse-CDF selection over non-negative weights in index order: returns
/// the first index whose running sum exceeds `u * total`. `None` when the
/// total mass is zero.
pub fn inverse_cdf(weights: &[f64], u: f64) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = u * total;
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cum += w;
            last_positive = Some(i);
            if target < cum {
                return Some(i);
            }
        }
    }
    // Rounding can leave `target` at the very top of the range.
    last_positive
}

impl DenseDistribution {
    /// Samples a token by inverse CDF in token-id order.
    pub fn sample(&self, u: f64) -> TokenId {
        let total: f64 = self.probs.iter().map(|&p| p as f64).sum();
        let target = u * total;
        let mut cum = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                cum += p as f64;
                last = i;
                if target < cum {
                    return TokenId(i as u32);
                }
            }
        }
        TokenId(last as u32)
    }
}

/// Top-K compressed distribution: `(id, prob)` pairs sorted by
/// non-increasing probability, ties broken by the lower id.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDistribution {
    entries: Vec<(TokenId, f32)>,
}

impl SparseDistribution {
    pub fn new(entries: Vec<(TokenId, f32)>) -> Result<Self, ProbError> {
        let mut sum = 0.0f64;
        for (i, &(_, p)) in entries.iter().enumerate() {
            if !(p > 0.0) || !p.is_finite() {
                return Err(ProbError::NonPositive { index: i });
            }
            sum += p as f64;
        }
        for pair in entries.windows(2) {
            let (a, pa) = pair[0];
            let (b, pb) = pair[1];
            if pa < pb || (pa == pb && a >= b) {
                return Err(if a == b { ProbError::DuplicateId(a) } else { ProbError::Unsorted });
            }
        }
        // Sorted order only rules out adjacent duplicates among equal probabilities.
        let mut ids: Vec<TokenId> = entries.iter().map(|e| e.0).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ProbError::DuplicateId(w[0]));
        }
        if sum > 1.0 + NORMALIZATION_TOLERANCE {
            return Err(ProbError::MassExceeded { sum });
        }
        Ok(Self { entries })
    }

    #[inline]
    pub fn entries(&self) -> &[(TokenId, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1 as f64).sum()
    }

    /// Probability of `token`, zero when it was truncated away.
    pub fn prob(&self, token: TokenId) -> f32 {
        self.entries.iter().find(|e| e.0 == token).map_or(0.0, |e| e.1)
    }

    /// Dense view with zeros outside the support (not renormalized).
    pub fn to_dense_weights(&self, vocab: usize) -> Vec<f32> {
        let mut out = vec![0.0; vocab];
        for &(id, p) in &self.entries {
            out[id.index()] = p;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("vocabulary size {0} must be in [2, 65536]")]
    Vocab(usize),
    #[error("draft length {0} must be in [1, 64]")]
    Gamma(usize),
    #[error("top-k {k} must be in [1, {vocab}]")]
    TopK { k: usize, vocab: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Per-session protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub vocab_size: usize,
    /// Draft length: tokens per speculative batch.
    pub gamma: usize,
    pub top_k: usize,
    /// Base seed; each random stream is derived from it by label.
    pub seed: u64,
}

impl SessionConfig {
    pub const DEFAULT_GAMMA: usize = 4;

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(2..=MAX_VOCAB).contains(&self.vocab_size) {
            return Err(ConfigError::Vocab(self.vocab_size));
        }
        if !(1..=64).contains(&self.gamma) {
            return Err(ConfigError::Gamma(self.gamma));
        }
        if self.top_k < 1 || self.top_k > self.vocab_size {
            return Err(ConfigError::TopK { k: self.top_k, vocab: self.vocab_size });
        }
        Ok(())
    }
}
