//! Desk-scale decoder-only speech-to-text with multi-token prediction.
//!
//! A single causal transformer consumes adapted speech frames as a prefix
//! and emits text tokens. Instead of one output head it carries K parallel
//! heads, each predicting a different future offset, so a single decoder
//! call can commit several tokens. The crate covers the whole loop:
//!
//! - [`numerics`]: dense f64 tensors, a reverse-mode tape, Adam.
//! - [`data`]: synthetic utterance corpus, serialization, batching.
//! - [`model`]: encoder, adapter, causal trunk, projection/latent heads,
//!   incremental KV-cache inference, checkpointing.
//! - [`decoding`]: greedy autoregressive, verify/threshold multi-token,
//!   and prefix-grouped batched beam search, with decoder-call accounting.
//! - [`training`]: multi-head cross-entropy and MWER fine-tuning.
//! - [`metrics`]: WER, the decoder-call ratio eta, report aggregation.
//! - [`cli`]: the `mtp-asr` command line (`gen`/`train`/`mwer`/`decode`/
//!   `eval`/`sweep`).
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability.

pub mod cli;
pub mod data;
pub mod decoding;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
