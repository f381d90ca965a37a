use rand::Rng;

use super::lstm::LstmCell;
use crate::error::{contract_err, dim_err, Result};
use crate::session::Session;
use crate::tensor::{ParamStore, Scalar, Tensor, Var};
use crate::vision::FeatureSequence;

/// Stacked bidirectional LSTM over the feature sequence.
#[derive(Debug, Clone)]
pub struct Encoder {
    /// `(forward, backward)` cells per layer.
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub dropout: f64,
}

/// Encoder results consumed by attention and decoder initialization.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B×Ts×2dh]`, zero at masked frames.
    pub annotations: Var,
    /// Per layer `[B×2dh]`: forward and backward final cells side by side.
    pub final_cells: Vec<Var>,
    /// `[B×Ts]`.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub steps: usize,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        din: usize,
        dh: usize,
        layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let d = if l == 0 { din } else { 2 * dh };
                (
                    LstmCell::new(store, &format!("encoder.{l}.fwd"), d, dh, rng),
                    LstmCell::new(store, &format!("encoder.{l}.bwd"), d, dh, rng),
                )
            })
            .collect();
        Self { layers, dropout }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].0.dh
    }

    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, seq: &FeatureSequence) -> Result<EncoderOutput> {
        let (b, ts) = (seq.batch, seq.steps);
        if ts == 0 {
            return Err(contract_err!("encode: empty feature sequence"));
        }
        if seq.mask.len() != b * ts {
            return Err(dim_err!("encode: mask of {} entries for {b}x{ts} frames", seq.mask.len()));
        }
        let dh = self.hidden();
        let mask_vals: Vec<T> = seq
            .mask
            .iter()
            .flat_map(|&m| std::iter::repeat(if m { T::one() } else { T::zero() }).take(2 * dh))
            .collect();
        let mut input = seq.vectors;
        let mut final_cells = Vec::with_capacity(self.layers.len());
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                input = s.graph.dropout(input, self.dropout, s.mode.is_train(), &mut s.rng)?;
            }
            let din = *s.graph.shape(input).last().expect("rank 3");
            let flat = s.graph.reshape(input, &[b * ts, din])?;
            let (hf, cf) = run_direction(s, fwd, flat, b, ts, &seq.mask, false)?;
            let (hb, cb) = run_direction(s, bwd, flat, b, ts, &seq.mask, true)?;
            let both = s.graph.concat_cols(&[hf, hb])?;
            let mut out = s.graph.mul_const(both, mask_vals.clone())?;
            if l > 0 {
                out = s.graph.add(out, flat)?;
            }
            input = s.graph.reshape(out, &[b, ts, 2 * dh])?;
            final_cells.push(s.graph.concat_cols(&[cf, cb])?);
        }
        // The residual sum can leak nonzero input at masked frames; zero it again.
        let flat = s.graph.reshape(input, &[b * ts, 2 * dh])?;
        let flat = s.graph.mul_const(flat, mask_vals)?;
        let annotations = s.graph.reshape(flat, &[b, ts, 2 * dh])?;
        Ok(EncoderOutput { annotations, final_cells, mask: seq.mask.clone(), batch: b, steps: ts })
    }
}

/// Runs one direction over `x: [B·Ts×din]`; masked frames carry the state
/// through unchanged. Returns outputs `[B·Ts×dh]` and the final cell `[B×dh]`.
fn run_direction<T: Scalar>(
    s: &mut Session<'_, T>,
    cell: &LstmCell,
    x: Var,
    b: usize,
    ts: usize,
    mask: &[bool],
    reverse: bool,
) -> Result<(Var, Var)> {
    let dh = cell.dh;
    let proj = cell.project_input(s, x)?;
    let proj = s.graph.reshape(proj, &[b, ts, 4 * dh])?;
    let mut h = s.graph.constant(Tensor::zeros(&[b, dh]));
    let mut c = h;
    let mut outs = vec![h; ts];
    let order: Vec<usize> = if reverse { (0..ts).rev().collect() } else { (0..ts).collect() };
    for t in order {
        let xt = s.graph.step_of(proj, t)?;
        let (hn, cn) = cell.step_projected(s, xt, h, c)?;
        let keep: Vec<bool> = (0..b).map(|r| mask[r * ts + t]).collect();
        if keep.iter().all(|&k| k) {
            (h, c) = (hn, cn);
        } else {
            h = s.graph.blend_rows(hn, h, &keep)?;
            c = s.graph.blend_rows(cn, c, &keep)?;
        }
        outs[t] = h;
    }
    let stacked = s.graph.stack_steps(&outs)?;
    Ok((s.graph.reshape(stacked, &[b * ts, dh])?, c))
}
