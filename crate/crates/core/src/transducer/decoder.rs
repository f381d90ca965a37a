use rand::Rng;

use super::attention::{Attention, AttentionMemory};
use super::lstm::LstmCell;
use crate::error::{contract_err, dim_err, Result};
use crate::init::{glorot_uniform, normal};
use crate::session::Session;
use crate::tensor::{ParamId, ParamStore, Scalar, Tensor, Var};

/// Recurrent state between decoder steps. Rows are hypotheses or batch items.
#[derive(Debug, Clone)]
pub struct DecoderState {
    /// Per layer `[R×dh]`.
    pub h: Vec<Var>,
    /// Per layer `[R×dh]`.
    pub c: Vec<Var>,
    /// Context from the previous step, `[R×Dk]`; zero before the first step.
    pub prev_context: Var,
}

/// Output of one decoder step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `[R×N]`.
    pub logits: Var,
    /// `[R×Ts]`.
    pub alpha: Var,
    pub state: DecoderState,
}

/// Attention decoder with input feeding.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub embedding: ParamId,
    pub layers: Vec<LstmCell>,
    /// Per layer `[Dk×dh]` map from encoder final cells to the initial cell.
    pub wa: Vec<ParamId>,
    pub attention: Attention,
    pub wc: ParamId,
    pub bc: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub dropout: f64,
    pub classes: usize,
    pub dh: usize,
    pub key_dim: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        classes: usize,
        embed_dim: usize,
        dh: usize,
        key_dim: usize,
        attn_dim: usize,
        layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add("decoder.embedding", normal(rng, &[classes, embed_dim], 0.01), true);
        let cells = (0..layers)
            .map(|l| {
                let din = if l == 0 { embed_dim + key_dim } else { dh };
                LstmCell::new(store, &format!("decoder.{l}"), din, dh, rng)
            })
            .collect();
        let wa = (0..layers)
            .map(|l| store.add(format!("decoder.{l}.wa"), glorot_uniform(rng, &[key_dim, dh], key_dim, dh), true))
            .collect();
        let attention = Attention::new(store, dh, key_dim, attn_dim, rng);
        let wc = store.add("output.wc", glorot_uniform(rng, &[dh + key_dim, dh], dh + key_dim, dh), true);
        let bc = store.add("output.bc", Tensor::zeros(&[dh]), true);
        let w_out = store.add("output.w", glorot_uniform(rng, &[dh, classes], dh, classes), true);
        let b_out = store.add("output.b", Tensor::zeros(&[classes]), true);
        Self { embedding, layers: cells, wa, attention, wc, bc, w_out, b_out, dropout, classes, dh, key_dim }
    }

    /// `c_ℓ = final_cells_ℓ · Wᵃ_ℓ`, `h_ℓ = 0`, previous context 0.
    pub fn init<T: Scalar>(&self, s: &mut Session<'_, T>, final_cells: &[Var]) -> Result<DecoderState> {
        if final_cells.len() != self.layers.len() {
            return Err(contract_err!(
                "decoder has {} layers but the encoder provided {} final cells",
                self.layers.len(),
                final_cells.len()
            ));
        }
        let rows = s.graph.shape(final_cells[0])[0];
        let mut c = Vec::with_capacity(self.layers.len());
        for (&fc, &wa) in final_cells.iter().zip(&self.wa) {
            let w = s.p(wa);
            c.push(s.graph.matmul(fc, w)?);
        }
        let zero_h = s.graph.constant(Tensor::zeros(&[rows, self.dh]));
        let prev_context = s.graph.constant(Tensor::zeros(&[rows, self.key_dim]));
        Ok(DecoderState { h: vec![zero_h; self.layers.len()], c, prev_context })
    }

    fn check_state<T: Scalar>(&self, s: &Session<'_, T>, state: &DecoderState, rows: usize) -> Result<()> {
        if state.h.len() != self.layers.len() || state.c.len() != self.layers.len() {
            return Err(contract_err!("decoder state is not initialized for {} layers", self.layers.len()));
        }
        for &v in state.h.iter().chain(&state.c) {
            if s.graph.shape(v) != [rows, self.dh] {
                return Err(dim_err!("decoder state {:?}, expected [{rows}, {}]", s.graph.shape(v), self.dh));
            }
        }
        if s.graph.shape(state.prev_context) != [rows, self.key_dim] {
            return Err(dim_err!("decoder context {:?}, expected [{rows}, {}]", s.graph.shape(state.prev_context), self.key_dim));
        }
        Ok(())
    }

    /// Consumes the previous tokens (one per row) and produces next-token logits.
    pub fn step<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: &[usize], state: &DecoderState, mem: &AttentionMemory) -> Result<StepOutput> {
        self.check_state(s, state, tokens.len())?;
        let table = s.p(self.embedding);
        let emb = s.graph.embedding(table, tokens)?;
        let mut input = s.graph.concat_cols(&[emb, state.prev_context])?;
        let mut h = Vec::with_capacity(self.layers.len());
        let mut c = Vec::with_capacity(self.layers.len());
        for (l, cell) in self.layers.iter().enumerate() {
            if l > 0 {
                input = s.graph.dropout(input, self.dropout, s.mode.is_train(), &mut s.rng)?;
            }
            let (hn, cn) = cell.step(s, input, state.h[l], state.c[l])?;
            input = if l > 0 { s.graph.add(hn, input)? } else { hn };
            h.push(hn);
            c.push(cn);
        }
        let query = *state.h.last().expect("at least one layer");
        let (context, alpha) = self.attention.attend(s, query, mem)?;
        let joined = s.graph.concat_cols(&[input, context])?;
        let (wc, bc) = (s.p(self.wc), s.p(self.bc));
        let combined = s.graph.affine(joined, wc, bc)?;
        let combined = s.graph.tanh(combined);
        let (w, b) = (s.p(self.w_out), s.p(self.b_out));
        let logits = s.graph.affine(combined, w, b)?;
        Ok(StepOutput { logits, alpha, state: DecoderState { h, c, prev_context: context } })
    }
}
