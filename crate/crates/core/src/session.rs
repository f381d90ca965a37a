//! Per-pass state shared by every layer: the tape, the parameters being
//! read, train/infer mode, the dropout RNG, and pending batch-norm
//! running-statistic updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Batch statistics observed by a training-mode batch-norm layer, to be
/// folded into the running averages once the pass is accepted.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// A session that records backward information.
    pub fn new(params: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self { graph: Graph::new(), params, mode, rng: ChaCha8Rng::seed_from_u64(seed), bn_updates: Vec::new() }
    }

    /// A session continuing on an existing graph.
    pub fn with_graph(graph: Graph<T>, params: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self { graph, params, mode, rng: ChaCha8Rng::seed_from_u64(seed), bn_updates: Vec::new() }
    }

    /// A value-only session for decoding.
    pub fn inference(params: &'a ParamStore<T>) -> Self {
        Self { graph: Graph::inference(), params, mode: Mode::Infer, rng: ChaCha8Rng::seed_from_u64(0), bn_updates: Vec::new() }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.params, id)
    }

    pub fn is_train(&self) -> bool {
        self.mode.is_train()
    }
}
