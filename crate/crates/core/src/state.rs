//! Rollback-able session state: an append-only committed prefix plus the
//! in-flight speculative batches stacked on top of it.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::rejection::DraftBatch;
use crate::types::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("batch {batch_id} starts at {got}, frontier is {expected}")]
    Discontiguous { batch_id: u32, expected: usize, got: usize },
    #[error("unknown batch {0}")]
    UnknownBatch(u32),
    #[error("batch {got} committed before older batch {oldest}")]
    OutOfOrder { oldest: u32, got: u32 },
    #[error("accepted {accepted} exceeds batch length {len}")]
    TooManyAccepted { accepted: usize, len: usize },
    #[error("partial acceptance of batch {0} requires a corrected token")]
    MissingCorrection(u32),
    #[error("cannot append committed tokens while batches are in flight")]
    SpeculationInFlight,
}

/// What a commit changed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CommitOutcome {
    /// Tokens appended to the committed prefix.
    pub appended: usize,
    /// In-flight batches dropped by the rollback.
    pub discarded: Vec<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct SessionState {
    committed: Vec<TokenId>,
    speculative: VecDeque<DraftBatch>,
    checkpoints: BTreeMap<u32, usize>,
}

impl SessionState {
    pub fn new(prefix: Vec<TokenId>) -> Self {
        Self { committed: prefix, ..Default::default() }
    }

    pub fn committed(&self) -> &[TokenId] {
        &self.committed
    }

    pub fn committed_len(&self) -> usize {
        self.committed.len()
    }

    /// Committed length plus the length of every in-flight batch.
    pub fn frontier(&self) -> usize {
        self.committed.len() + self.speculative.iter().map(DraftBatch::len).sum::<usize>()
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &DraftBatch> {
        self.speculative.iter()
    }

    pub fn in_flight_count(&self) -> usize {
        self.speculative.len()
    }

    pub fn batch(&self, batch_id: u32) -> Option<&DraftBatch> {
        self.speculative.iter().find(|b| b.batch_id == batch_id)
    }

    pub fn checkpoint(&self, batch_id: u32) -> Option<usize> {
        self.checkpoints.get(&batch_id).copied()
    }

    /// Appends tokens straight to the committed prefix (seed token).
    pub fn push_committed(&mut self, token: TokenId) -> Result<(), StateError> {
        if !self.speculative.is_empty() {
            return Err(StateError::SpeculationInFlight);
        }
        self.committed.push(token);
        Ok(())
    }

    pub fn append_speculative(&mut self, batch: DraftBatch) -> Result<(), StateError> {
        let expected = self.frontier();
        if batch.base_pos != expected {
            return Err(StateError::Discontiguous { batch_id: batch.batch_id, expected, got: batch.base_pos });
        }
        if let Some(last) = self.speculative.back() {
            if batch.batch_id <= last.batch_id {
                return Err(StateError::OutOfOrder { oldest: last.batch_id, got: batch.batch_id });
            }
        }
        self.checkpoints.insert(batch.batch_id, batch.base_pos);
        self.speculative.push_back(batch);
        Ok(())
    }

    /// Commits the oldest in-flight batch: its first `accepted` tokens, then
    /// `corrected` if present. A correction or partial acceptance rolls back
    /// every later in-flight batch.
    pub fn commit(
        &mut self,
        batch_id: u32,
        accepted: usize,
        corrected: Option<TokenId>,
    ) -> Result<CommitOutcome, StateError> {
        let oldest = match self.speculative.front() {
            Some(b) => b.batch_id,
            None => return Err(StateError::UnknownBatch(batch_id)),
        };
        if oldest != batch_id {
            return Err(if self.batch(batch_id).is_some() {
                StateError::OutOfOrder { oldest, got: batch_id }
            } else {
                StateError::UnknownBatch(batch_id)
            });
        }
        let len = self.speculative[0].len();
        if accepted > len {
            return Err(StateError::TooManyAccepted { accepted, len });
        }
        if accepted < len && corrected.is_none() {
            return Err(StateError::MissingCorrection(batch_id));
        }
        let batch = self.speculative.pop_front().expect("checked non-empty");
        self.checkpoints.remove(&batch_id);
        self.committed.extend_from_slice(&batch.tokens[..accepted]);
        let mut outcome = CommitOutcome { appended: accepted, discarded: Vec::new() };
        if let Some(t) = corrected {
            self.committed.push(t);
            outcome.appended += 1;
            for b in self.speculative.drain(..) {
                self.checkpoints.remove(&b.batch_id);
                outcome.discarded.push(b.batch_id);
            }
        }
        Ok(outcome)
    }

    /// Drops every in-flight batch without committing anything.
    pub fn discard_all(&mut self) -> Vec<u32> {
        self.checkpoints.clear();
        self.speculative.drain(..).map(|b| b.batch_id).collect()
    }

    /// Last `m` tokens of committed followed by every in-flight batch.
    pub fn frontier_context(&self, m: usize) -> Vec<TokenId> {
        let spec_len: usize = self.speculative.iter().map(DraftBatch::len).sum();
        let mut out = Vec::with_capacity(m);
        let from_committed = m.saturating_sub(spec_len).min(self.committed.len());
        out.extend_from_slice(&self.committed[self.committed.len() - from_committed..]);
        let spec: Vec<TokenId> = self.speculative.iter().flat_map(|b| b.tokens.iter().copied()).collect();
        out.extend_from_slice(&spec[spec.len().saturating_sub(m)..]);
        out
    }
}
