use serde::{Deserialize, Serialize};

use super::{cast, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{HtrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(numel: usize, config: AdamConfig) -> Self {
        Self { step_count: 0, m: vec![T::zero(); numel], v: vec![T::zero(); numel], config }
    }
}

/// One bias-corrected Adam update of `param` from its populated `grad`.
pub fn adam_step<T: Scalar>(param: &mut Tensor<T>, state: &mut AdamState<T>) -> Result<()> {
    let grad = param
        .grad
        .take()
        .ok_or_else(|| HtrError::State("adam_step on a parameter without gradient".into()))?;
    if state.m.len() != param.numel() || state.v.len() != param.numel() {
        param.grad = Some(grad);
        return Err(HtrError::State("optimizer moments do not match parameter size".into()));
    }
    state.step_count += 1;
    let c = state.config;
    let (b1, b2): (T, T) = (cast(c.beta1), cast(c.beta2));
    let t = state.step_count as i32;
    let bc1: T = T::one() - b1.powi(t);
    let bc2: T = T::one() - b2.powi(t);
    let (lr, eps): (T, T) = (cast(c.lr), cast(c.epsilon));
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(&grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    param.grad = Some(grad);
    Ok(())
}

/// Adam over every trainable tensor of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: Vec<Option<AdamState<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, states: Vec::new() }
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState<T>> {
        self.states.get(id.index()).and_then(Option::as_ref)
    }

    pub(crate) fn set_state(&mut self, id: ParamId, state: AdamState<T>) {
        if self.states.len() <= id.index() {
            self.states.resize_with(id.index() + 1, || None);
        }
        self.states[id.index()] = Some(state);
    }

    pub fn states(&self) -> impl Iterator<Item = (ParamId, &AdamState<T>)> {
        self.states.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| (ParamId(i), s)))
    }

    /// Updates every trainable parameter that holds a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for id in params.trainable_ids() {
            let p = params.get_mut(id);
            if p.grad.is_none() {
                continue;
            }
            if self.states.len() <= id.index() {
                self.states.resize_with(id.index() + 1, || None);
            }
            let cfg = self.config;
            let st = self.states[id.index()].get_or_insert_with(|| AdamState::new(p.numel(), cfg));
            st.config = cfg;
            adam_step(p, st)?;
        }
        Ok(())
    }
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> T {
    let norm = params.grad_norm();
    let limit: T = cast(max_norm);
    if norm > limit && norm > T::zero() {
        let s = limit / norm;
        for id in params.trainable_ids() {
            if let Some(g) = params.get_mut(id).grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
