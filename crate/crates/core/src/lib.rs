//! Character-anchor pooling text recognizer.
//!
//! The crate is organized around a small f64 tensor library with tape-based
//! reverse-mode differentiation ([`tape`]), on top of which the model is
//! built: a residual CNN backbone with top-down feature fusion
//! ([`backbone`]), a character anchoring head ([`anchoring`]), anchor
//! pooling along a resampled character anchor line ([`pooling`]), and an
//! attentional BiLSTM encoder / LSTM decoder ([`seq2seq`]).
//!
//! [`synthdata`] renders the bundled synthetic glyph corpus, [`training`]
//! holds the losses, the ADADELTA optimizer and the two-stage training
//! loop, and [`evaluation`] scores predictions and the quality of predicted
//! anchor lines.
//!
//! Batch-level work (per-sample gradients, corpus rendering, evaluation) is
//! data-parallel via rayon when the default `parallel` feature is enabled;
//! the sequential fallback produces bitwise-identical results.

pub mod anchoring;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod layers;
pub mod lstm;
pub mod par;
pub mod pooling;
pub mod rng;
pub mod model;
pub mod seq2seq;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
