use rand::Rng;

use crate::error::{dim_err, Result};
use crate::init::glorot_uniform;
use crate::session::Session;
use crate::tensor::{ParamId, ParamStore, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Layer-normalized LSTM cell with gate blocks ordered
/// (input, forget, candidate, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub din: usize,
    pub dh: usize,
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
    pub ln_x: (ParamId, ParamId),
    pub ln_h: (ParamId, ParamId),
    pub ln_c: (ParamId, ParamId),
}

impl LstmCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, din: usize, dh: usize, rng: &mut R) -> Self {
        let g = 4 * dh;
        let mut bias = vec![T::zero(); g];
        bias[dh..2 * dh].fill(T::one());
        let mut ln = |name: &str, d: usize| {
            (
                store.add(format!("{prefix}.{name}.gain"), Tensor::full(&[d], T::one()), true),
                store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[d]), true),
            )
        };
        let (ln_x, ln_h, ln_c) = (ln("ln_x", g), ln("ln_h", g), ln("ln_c", dh));
        Self {
            din,
            dh,
            wx: store.add(format!("{prefix}.wx"), glorot_uniform(rng, &[din, g], din, g), true),
            wh: store.add(format!("{prefix}.wh"), glorot_uniform(rng, &[dh, g], dh, g), true),
            bias: store.add(format!("{prefix}.bias"), Tensor::new(vec![g], bias).expect("shape"), true),
            ln_x,
            ln_h,
            ln_c,
        }
    }

    /// Normalized input projection `LN(x·Wx)` for any number of rows; the
    /// projection of a whole sequence can be computed up front.
    pub fn project_input<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match s.graph.shape(x) {
            [_, d] if *d == self.din => {}
            sh => return Err(dim_err!("lstm input {sh:?}, expected [_, {}]", self.din)),
        }
        let wx = s.p(self.wx);
        let xw = s.graph.matmul(x, wx)?;
        let (g, b) = (s.p(self.ln_x.0), s.p(self.ln_x.1));
        s.graph.layer_norm(xw, g, b, LN_EPS)
    }

    /// One step from a precomputed input projection.
    pub fn step_projected<T: Scalar>(&self, s: &mut Session<'_, T>, xproj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let rows = s.graph.shape(xproj)[0];
        for (v, what, d) in [(xproj, "projection", 4 * self.dh), (h, "h", self.dh), (c, "c", self.dh)] {
            if s.graph.shape(v) != [rows, d] {
                return Err(dim_err!("lstm {what}: shape {:?}, expected [{rows}, {d}]", s.graph.shape(v)));
            }
        }
        let wh = s.p(self.wh);
        let hw = s.graph.matmul(h, wh)?;
        let (g, b) = (s.p(self.ln_h.0), s.p(self.ln_h.1));
        let hn = s.graph.layer_norm(hw, g, b, LN_EPS)?;
        let pre = s.graph.add(xproj, hn)?;
        let bias = s.p(self.bias);
        let pre = s.graph.add_row(pre, bias)?;
        let dh = self.dh;
        let i = s.graph.slice_cols(pre, 0, dh)?;
        let f = s.graph.slice_cols(pre, dh, dh)?;
        let cand = s.graph.slice_cols(pre, 2 * dh, dh)?;
        let o = s.graph.slice_cols(pre, 3 * dh, dh)?;
        let (i, f, o) = (s.graph.sigmoid(i), s.graph.sigmoid(f), s.graph.sigmoid(o));
        let cand = s.graph.tanh(cand);
        let fc = s.graph.mul(f, c)?;
        let ic = s.graph.mul(i, cand)?;
        let c_new = s.graph.add(fc, ic)?;
        let (g, b) = (s.p(self.ln_c.0), s.p(self.ln_c.1));
        let cn = s.graph.layer_norm(c_new, g, b, LN_EPS)?;
        let ct = s.graph.tanh(cn);
        let h_new = s.graph.mul(o, ct)?;
        Ok((h_new, c_new))
    }

    pub fn step<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xp = self.project_input(s, x)?;
        self.step_projected(s, xp, h, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "l", 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        for id in [cell.wx, cell.wh, cell.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut s = Session::new(&store, Mode::Infer, 0);
        let x = s.graph.constant(Tensor::zeros(&[2, 3]));
        let h = s.graph.constant(Tensor::zeros(&[2, 4]));
        let c = s.graph.constant(Tensor::zeros(&[2, 4]));
        let (h2, c2) = cell.step(&mut s, x, h, c).unwrap();
        assert!(s.graph.data(h2).iter().all(|&v| v == 0.0));
        assert!(s.graph.data(c2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::<f32>::new();
        let cell = LstmCell::new(&mut store, "l", 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.get(cell.bias).data(), &[0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn cell_growth_bounded() {
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "l", 3, 5, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = Session::new(&store, Mode::Infer, 0);
        let x = s.graph.constant(crate::init::normal(&mut rng, &[4, 3], 3.0));
        let h = s.graph.constant(crate::init::normal(&mut rng, &[4, 5], 1.0));
        let c = s.graph.constant(crate::init::normal(&mut rng, &[4, 5], 2.0));
        let (_, c2) = cell.step(&mut s, x, h, c).unwrap();
        for (a, b) in s.graph.data(c2).iter().zip(s.graph.data(c)) {
            assert!(a.abs() <= b.abs() + 1.0);
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut store = ParamStore::<f64>::new();
        let cell = LstmCell::new(&mut store, "l", 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let mut s = Session::new(&store, Mode::Infer, 0);
        let x = s.graph.constant(Tensor::zeros(&[2, 5]));
        let h = s.graph.constant(Tensor::zeros(&[2, 4]));
        let err = cell.step(&mut s, x, h, h).unwrap_err();
        assert!(matches!(err, crate::HtrError::Dimension(_)));
    }
}
