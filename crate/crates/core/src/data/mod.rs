//! Tokenization, vocabulary, noise synthesis and dataset IO.

pub mod io;
pub mod noise;
pub mod synthetic;
pub mod tokenize;
pub mod vocab;

pub use noise::{synthesize_pair, NoiseConfig, ShuffleLevel};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{TokenId, Vocab};
