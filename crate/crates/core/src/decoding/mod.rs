//! Inference strategies and decoder-call accounting.
//!
//! Three ways to spend a decoder call:
//!
//! - greedy autoregressive: one call per token, head 1 only;
//! - multi-token predict-verify-accept: each call verifies the previous
//!   draft against the main head (strictly or top-M) and drafts the next
//!   K tokens, or accepts the longest head prefix clearing a confidence
//!   threshold;
//! - prefix-grouped batched beam search over either of the greedy rules.
//!
//! Every hypothesis records which head emitted each token, that head's
//! log-probability, and the number of decoder calls consumed.

mod accept;
mod beam;
mod greedy;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use accept::{threshold_accept, verify_accept};
pub use beam::{beam_search, sequential_reference};
pub use greedy::{decode_greedy_ar, decode_multitoken};

/// Tokens accepted per call never drop below this floor.
pub const MIN_ACCEPT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Plain autoregressive decoding with head 1.
    GreedyAr,
    /// Accept drafted tokens that fall in the main head's top-M candidates.
    Verify { m: usize },
    /// Accept the longest head prefix whose argmax confidences reach tau.
    Threshold { tau: f64 },
}

impl Strategy {
    pub fn describe(&self) -> String {
        match self {
            Strategy::GreedyAr => "greedy_ar".to_string(),
            Strategy::Verify { m } => format!("verify_top{m}"),
            Strategy::Threshold { tau } => format!("threshold_{tau}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub max_tokens: usize,
    /// Alternative verify-mode bookkeeping: the fresh main-head token at
    /// the verification boundary is deferred to the next call's draft
    /// instead of being appended by the call that computed it. Emitted
    /// sequences are unchanged; only truncation boundaries can differ.
    pub append_corrected: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Threshold { tau: 0.8 },
            beam_size: 1,
            max_tokens: 48,
            append_corrected: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Verify { m } if m < 1 => {
                return Err(Error::config("verify strategy needs M >= 1"));
            }
            Strategy::Threshold { tau } if !(tau > 0.0 && tau <= 1.0) => {
                return Err(Error::config(format!(
                    "threshold strategy needs 0 < tau <= 1, got {tau}"
                )));
            }
            _ => {}
        }
        if self.beam_size < 1 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        if self.max_tokens < 1 {
            return Err(Error::config("max_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// One decoded sequence with per-token head provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// 1-based index of the head that emitted each token.
    pub head_of: Vec<usize>,
    /// Log-probability each token received from its emitting head.
    pub token_logp: Vec<f64>,
    /// Cumulative log-probability (sum of `token_logp`).
    pub score: f64,
    /// Decoder forward calls consumed, prefill included.
    pub nu: usize,
    pub finished: bool,
    pub truncated: bool,
}

impl Hypothesis {
    pub(crate) fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            head_of: Vec::new(),
            token_logp: Vec::new(),
            score: 0.0,
            nu: 0,
            finished: false,
            truncated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub(crate) fn push(&mut self, token: usize, head: usize, logp: f64) {
        self.tokens.push(token);
        self.head_of.push(head);
        self.token_logp.push(logp);
        self.score += logp;
    }
}

/// Decoder calls consumed by a hypothesis.
pub fn count_calls(hypothesis: &Hypothesis) -> usize {
    hypothesis.nu
}
