//! Binary frames exchanged between edge and cloud.
//!
//! Layout (all integers little-endian, probabilities IEEE-754 binary32):
//!
//! ```text
//! header     kind u8 | batch_id u32 | body_len u16
//! Prefill    count u16 | count x token u16
//! Seed       token u16
//! Draft      base_pos u32 | count u8 | truncated u8 | count x (token u16, q f32)
//! PreVerify  base_pos u32 | count u8 | count x token u16
//! Verdict    accepted u8 | rejected u8 | [k u16 | k x (token u16, prob f32)]
//! Interrupt  rollback_pos u32
//! ```
//!
//! The byte-level walkthrough with hex examples lives in `docs/protocol.md`.

use thiserror::Error;

use crate::rejection::{DraftBatch, RejectionError, Verdict, VerdictKind};
use crate::types::{ProbError, SparseDistribution, TokenId};

pub const HEADER_LEN: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("input truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown frame kind {0}")]
    BadKind(u8),
    #[error("length mismatch: {0}")]
    LengthMismatch(&'static str),
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
    #[error("{field} value {value} does not fit its wire width")]
    Overflow { field: &'static str, value: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Prefill = 0,
    Seed = 1,
    Draft = 2,
    PreVerify = 3,
    Verdict = 4,
    Interrupt = 5,
}

impl TryFrom<u8> for FrameKind {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            0 => FrameKind::Prefill,
            1 => FrameKind::Seed,
            2 => FrameKind::Draft,
            3 => FrameKind::PreVerify,
            4 => FrameKind::Verdict,
            5 => FrameKind::Interrupt,
            other => return Err(WireError::BadKind(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameBody {
    Prefill { tokens: Vec<TokenId> },
    Seed { token: TokenId },
    Draft { base_pos: u32, truncated: bool, entries: Vec<(TokenId, f32)> },
    PreVerify { base_pos: u32, tokens: Vec<TokenId> },
    Verdict { accepted: u8, rejected: Option<Vec<(TokenId, f32)>> },
    Interrupt { rollback_pos: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub batch_id: u32,
    pub body: FrameBody,
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self.body {
            FrameBody::Prefill { .. } => FrameKind::Prefill,
            FrameBody::Seed { .. } => FrameKind::Seed,
            FrameBody::Draft { .. } => FrameKind::Draft,
            FrameBody::PreVerify { .. } => FrameKind::PreVerify,
            FrameBody::Verdict { .. } => FrameKind::Verdict,
            FrameBody::Interrupt { .. } => FrameKind::Interrupt,
        }
    }

    pub fn from_batch(batch: &DraftBatch) -> Result<Self, WireError> {
        Ok(Frame {
            batch_id: batch.batch_id,
            body: FrameBody::Draft {
                base_pos: fit_u32("base_pos", batch.base_pos)?,
                truncated: batch.truncated,
                entries: batch.tokens.iter().copied().zip(batch.chosen_probs.iter().copied()).collect(),
            },
        })
    }

    pub fn from_verdict(verdict: &Verdict) -> Result<Self, WireError> {
        let accepted = u8::try_from(verdict.accepted_count)
            .map_err(|_| WireError::Overflow { field: "accepted", value: verdict.accepted_count as u64 })?;
        let rejected = match &verdict.kind {
            VerdictKind::AllAccepted => None,
            VerdictKind::Rejected { sparse_target, .. } => Some(sparse_target.entries().to_vec()),
        };
        Ok(Frame { batch_id: verdict.batch_id, body: FrameBody::Verdict { accepted, rejected } })
    }

    /// Rebuilds the draft batch carried by a `Draft` frame.
    pub fn to_batch(&self) -> Option<Result<DraftBatch, RejectionError>> {
        match &self.body {
            FrameBody::Draft { base_pos, truncated, entries } => Some(DraftBatch::new(
                self.batch_id,
                *base_pos as usize,
                entries.iter().map(|e| e.0).collect(),
                entries.iter().map(|e| e.1).collect(),
                *truncated,
            )),
            _ => None,
        }
    }

    /// Rebuilds the verdict carried by a `Verdict` frame.
    pub fn to_verdict(&self) -> Option<Result<Verdict, ProbError>> {
        match &self.body {
            FrameBody::Verdict { accepted, rejected } => Some(match rejected {
                None => Ok(Verdict {
                    batch_id: self.batch_id,
                    accepted_count: *accepted as usize,
                    kind: VerdictKind::AllAccepted,
                }),
                Some(entries) => SparseDistribution::new(entries.clone()).map(|sparse_target| Verdict {
                    batch_id: self.batch_id,
                    accepted_count: *accepted as usize,
                    kind: VerdictKind::Rejected { position: *accepted as usize, sparse_target },
                }),
            }),
            _ => None,
        }
    }
}

fn fit_u32(field: &'static str, v: usize) -> Result<u32, WireError> {
    u32::try_from(v).map_err(|_| WireError::Overflow { field, value: v as u64 })
}

fn put_token(out: &mut Vec<u8>, t: TokenId) -> Result<(), WireError> {
    let v = u16::try_from(t.0).map_err(|_| WireError::Overflow { field: "token_id", value: t.0 as u64 })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_count_u8(out: &mut Vec<u8>, field: &'static str, n: usize) -> Result<(), WireError> {
    let v = u8::try_from(n).map_err(|_| WireError::Overflow { field, value: n as u64 })?;
    out.push(v);
    Ok(())
}

fn put_count_u16(out: &mut Vec<u8>, field: &'static str, n: usize) -> Result<(), WireError> {
    let v = u16::try_from(n).map_err(|_| WireError::Overflow { field, value: n as u64 })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let mut body = Vec::new();
    match &frame.body {
        FrameBody::Prefill { tokens } => {
            put_count_u16(&mut body, "prefill count", tokens.len())?;
            for &t in tokens {
                put_token(&mut body, t)?;
            }
        }
        FrameBody::Seed { token } => put_token(&mut body, *token)?,
        FrameBody::Draft { base_pos, truncated, entries } => {
            body.extend_from_slice(&base_pos.to_le_bytes());
            put_count_u8(&mut body, "draft count", entries.len())?;
            body.push(*truncated as u8);
            for &(t, q) in entries {
                put_token(&mut body, t)?;
                body.extend_from_slice(&q.to_le_bytes());
            }
        }
        FrameBody::PreVerify { base_pos, tokens } => {
            body.extend_from_slice(&base_pos.to_le_bytes());
            put_count_u8(&mut body, "pre-verify count", tokens.len())?;
            for &t in tokens {
                put_token(&mut body, t)?;
            }
        }
        FrameBody::Verdict { accepted, rejected } => {
            body.push(*accepted);
            body.push(rejected.is_some() as u8);
            if let Some(entries) = rejected {
                put_count_u16(&mut body, "top-k count", entries.len())?;
                for &(t, p) in entries {
                    put_token(&mut body, t)?;
                    body.extend_from_slice(&p.to_le_bytes());
                }
            }
        }
        FrameBody::Interrupt { rollback_pos } => body.extend_from_slice(&rollback_pos.to_le_bytes()),
    }
    let body_len =
        u16::try_from(body.len()).map_err(|_| WireError::Overflow { field: "body_len", value: body.len() as u64 })?;
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.push(frame.kind() as u8);
    out.extend_from_slice(&frame.batch_id.to_le_bytes());
    out.extend_from_slice(&body_len.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::LengthMismatch("body shorter than its fields"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn token(&mut self) -> Result<TokenId, WireError> {
        Ok(TokenId(self.u16()? as u32))
    }

    fn flag(&mut self, field: &'static str) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::InvalidField(field)),
        }
    }
}

/// Parses exactly one frame; never reads past the declared body length.
pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated { needed: HEADER_LEN, have: bytes.len() });
    }
    let kind = FrameKind::try_from(bytes[0])?;
    let batch_id = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
    let body_len = u16::from_le_bytes(bytes[5..7].try_into().unwrap()) as usize;
    let total = HEADER_LEN + body_len;
    if bytes.len() < total {
        return Err(WireError::Truncated { needed: total, have: bytes.len() });
    }
    if bytes.len() > total {
        return Err(WireError::LengthMismatch("trailing bytes after body"));
    }
    let mut r = Reader { buf: &bytes[HEADER_LEN..total], pos: 0 };
    let body = match kind {
        FrameKind::Prefill => {
            let n = r.u16()? as usize;
            FrameBody::Prefill { tokens: (0..n).map(|_| r.token()).collect::<Result<_, _>>()? }
        }
        FrameKind::Seed => FrameBody::Seed { token: r.token()? },
        FrameKind::Draft => {
            let base_pos = r.u32()?;
            let n = r.u8()? as usize;
            let truncated = r.flag("truncated")?;
            let entries = (0..n).map(|_| Ok((r.token()?, r.f32()?))).collect::<Result<_, WireError>>()?;
            FrameBody::Draft { base_pos, truncated, entries }
        }
        FrameKind::PreVerify => {
            let base_pos = r.u32()?;
            let n = r.u8()? as usize;
            FrameBody::PreVerify { base_pos, tokens: (0..n).map(|_| r.token()).collect::<Result<_, _>>()? }
        }
        FrameKind::Verdict => {
            let accepted = r.u8()?;
            let rejected = if r.flag("rejected")? {
                let k = r.u16()? as usize;
                Some((0..k).map(|_| Ok((r.token()?, r.f32()?))).collect::<Result<_, WireError>>()?)
            } else {
                None
            };
            FrameBody::Verdict { accepted, rejected }
        }
        FrameKind::Interrupt => FrameBody::Interrupt { rollback_pos: r.u32()? },
    };
    if r.pos != body_len {
        return Err(WireError::LengthMismatch("body longer than its fields"));
    }
    Ok(Frame { batch_id, body })
}

/// Closed-form encoded size. `arity` is the token count for Prefill, Draft
/// and PreVerify, and the Top-K entry count for Verdict (0 meaning an
/// all-accepted verdict). Answers hypothetical sizes beyond the 16-bit
/// wire limits too.
pub fn frame_size_model(kind: FrameKind, arity: u64) -> u64 {
    let h = HEADER_LEN as u64;
    match kind {
        FrameKind::Prefill => h + 2 + 2 * arity,
        FrameKind::Seed => h + 2,
        FrameKind::Draft => h + 6 + 6 * arity,
        FrameKind::PreVerify => h + 5 + 2 * arity,
        FrameKind::Verdict if arity == 0 => h + 2,
        FrameKind::Verdict => h + 4 + 6 * arity,
        FrameKind::Interrupt => h + 4,
    }
}
