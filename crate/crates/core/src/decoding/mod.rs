//! Sequence generation from a step-wise model: greedy decoding, beam search
//! over the joint token probability, and an exhaustive oracle for tiny
//! instances.

pub mod beam;
pub mod exhaustive;
pub mod greedy;
pub mod model;
pub mod stub;

pub use beam::{beam_search, beam_search_traced, BeamTrace};
pub use exhaustive::{exhaustive_decode, MAX_ORACLE_CLASSES, MAX_ORACLE_LEN};
pub use greedy::greedy_decode;
pub use model::{recognize, DecodeMode, ModelStepper, Recognition};
pub use stub::{random_prefix_model, PrefixModel};

use std::cmp::Ordering;

use crate::error::Result;

/// A decoder driven one step at a time over a set of rows (hypotheses).
pub trait StepModel {
    type State: Clone;

    /// Softmax width N.
    fn num_classes(&self) -> usize;
    fn eos(&self) -> usize;
    /// Whether decoding may produce `token` (special tokens such as padding
    /// are excluded).
    fn emittable(&self, _token: usize) -> bool {
        true
    }
    /// Source length Ts, used for the default length cap.
    fn frames(&self) -> usize;
    /// State for a single row before any token was consumed.
    fn initial(&mut self) -> Result<Self::State>;
    /// Feeds `prev[r]` to row `r` (`None` on the first step) and returns
    /// per-row next-token log-probabilities with the advanced state.
    fn step(&mut self, state: &Self::State, prev: Option<&[usize]>) -> Result<(Vec<Vec<f64>>, Self::State)>;
    /// State made of the given rows; indices may repeat.
    fn select(&mut self, state: &Self::State, rows: &[usize]) -> Result<Self::State>;
}

/// Hard cap on decoded length: `⌈1.5·Ts⌉ + 10`.
pub fn default_max_len(frames: usize) -> usize {
    (3 * frames).div_ceil(2) + 10
}

/// Outcome of a decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Emitted tokens, `<eos>` excluded.
    pub tokens: Vec<usize>,
    /// Joint log-probability, including the `<eos>` step when finished.
    pub log_prob: f64,
    /// `<eos>` was emitted before the length cap.
    pub finished: bool,
    /// Probability of each chosen token (greedy only; empty for beam).
    pub step_probs: Vec<f64>,
}

impl Decoded {
    pub fn truncated(&self) -> bool {
        !self.finished
    }
}

/// Descending score, then lexicographically smaller sequence first.
pub(crate) fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}
