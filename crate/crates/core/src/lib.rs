//! Offline handwritten text-line recognition.
//!
//! The pipeline: a convolutional feature extractor turns a 32-pixel-high line
//! image into a left-to-right sequence of column features; a two-layer
//! bidirectional LSTM encodes the sequence; an LSTM decoder with additive
//! attention and input feeding emits characters. Training minimizes focal
//! loss with Adam; inference uses greedy or beam search decoding.
//!
//! Every differentiable computation runs on [`tensor::Graph`], a small
//! reverse-mode differentiation tape, which keeps gradients checkable against
//! finite differences (see [`gradcheck`]).

pub mod decoding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod init;
pub mod session;
pub mod tensor;
pub mod training;
pub mod transducer;
pub mod vision;

pub use error::{CheckpointError, HtrError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub struct Tensors;
    #[doc = include_str!("../../../book/src/vision.md")]
    pub struct Vision;
    #[doc = include_str!("../../../book/src/transducer.md")]
    pub struct Transducer;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/decoding.md")]
    pub struct Decoding;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
}
