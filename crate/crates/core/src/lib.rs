//! Multi-stage, multi-task training of online attention encoder-decoder
//! speech recognizers: character CTC encoder, character-to-BPE conversion,
//! and a monotonic chunkwise attention decoder.

pub mod attention;
pub mod ctc;
pub mod datametrics;
pub mod decoder;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod lm;
pub mod numerics;
pub mod pipeline;
pub mod tokenizer;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Tensor, Var};
