use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::StepModel;
use crate::error::{dim_err, Result};

/// A decoder whose next-token distribution is an arbitrary function of the
/// tokens emitted so far. Used to test the search procedures.
pub struct PrefixModel<F> {
    pub classes: usize,
    pub eos: usize,
    pub frames: usize,
    pub probs: F,
}

impl<F: FnMut(&[usize]) -> Vec<f64>> PrefixModel<F> {
    pub fn new(classes: usize, eos: usize, probs: F) -> Self {
        Self { classes, eos, frames: 4, probs }
    }
}

impl<F: FnMut(&[usize]) -> Vec<f64>> StepModel for PrefixModel<F> {
    type State = Vec<Vec<usize>>;

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn eos(&self) -> usize {
        self.eos
    }

    fn frames(&self) -> usize {
        self.frames
    }

    fn initial(&mut self) -> Result<Self::State> {
        Ok(vec![Vec::new()])
    }

    fn step(&mut self, state: &Self::State, prev: Option<&[usize]>) -> Result<(Vec<Vec<f64>>, Self::State)> {
        let mut next = state.clone();
        if let Some(prev) = prev {
            if prev.len() != state.len() {
                return Err(dim_err!("{} tokens for {} rows", prev.len(), state.len()));
            }
            for (p, &t) in next.iter_mut().zip(prev) {
                p.push(t);
            }
        }
        let mut out = Vec::with_capacity(next.len());
        for p in &next {
            let dist = (self.probs)(p);
            if dist.len() != self.classes {
                return Err(dim_err!("stub produced {} probabilities for {} classes", dist.len(), self.classes));
            }
            out.push(dist.iter().map(|&q| q.ln()).collect());
        }
        Ok((out, next))
    }

    fn select(&mut self, state: &Self::State, rows: &[usize]) -> Result<Self::State> {
        rows.iter().map(|&r| state.get(r).cloned().ok_or_else(|| dim_err!("row {r} of {}", state.len()))).collect()
    }
}

/// Random conditional tables: each prefix gets a distribution drawn from
/// a seed derived from the prefix, so repeated queries agree.
pub fn random_prefix_model(classes: usize, eos: usize, seed: u64, sharpness: f64) -> PrefixModel<impl FnMut(&[usize]) -> Vec<f64>> {
    PrefixModel::new(classes, eos, move |prefix: &[usize]| {
        let mut h = seed ^ 0x51_7CC1_B727_220A;
        for &t in prefix {
            h = (h ^ (t as u64 + 1)).wrapping_mul(0x100_0000_01B3).rotate_left(17);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let normal = Normal::new(0.0, sharpness).expect("finite sharpness");
        let w: Vec<f64> = (0..classes).map(|_| normal.sample(&mut rng).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    })
}
