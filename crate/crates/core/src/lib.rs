//! Text-compression-aided Transformer encoding.
//!
//! The crate builds everything on a small reverse-mode autodiff engine
//! ([`autodiff`]) over dense `f64` matrices:
//!
//! - [`transformer`]: encoder, causal decoder and output head.
//! - [`etc`]: explicit compression, a seq2seq compressor decoded with a
//!   ratio-capped beam search (pipeline manner) or batch greedy decoding that
//!   exposes decoder hidden states (joint manner).
//! - [`itc`]: implicit compression, a fertility predictor, top-K filtering and
//!   a single-pass non-autoregressive decoder trained inside the task model.
//! - [`fusion`]: encoder-side, gated decoder-side and both-side fusion of the
//!   compressed representation into the backbone.
//! - [`tasks`]: translation, span extraction and multiple choice heads.
//! - [`data`], [`eval`]: tokenization, noise synthesis, synthetic corpora and
//!   ROUGE / BLEU / EM / accuracy.
//! - [`experiments`]: training loops and the ablation harness behind the CLI.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod etc;
pub mod eval;
pub mod exec;
pub mod experiments;
pub mod fusion;
pub mod gradcheck;
pub mod itc;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod transformer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
