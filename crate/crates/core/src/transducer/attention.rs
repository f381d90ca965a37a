use rand::Rng;

use crate::error::{dim_err, Result};
use crate::init::glorot_uniform;
use crate::session::Session;
use crate::tensor::{ParamId, ParamStore, Scalar, Var};

/// Additive scorer `e_j = v·tanh(W1·q + W2·h_j)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub w1: ParamId,
    pub w2: ParamId,
    pub v: ParamId,
    pub query_dim: usize,
    pub key_dim: usize,
    pub attn_dim: usize,
}

/// Annotations with their projected keys, ready to be attended over.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    /// `[Bm×Ts×Dk]`, `Bm` either the query batch or 1 (shared).
    pub annotations: Var,
    /// `[Bm×Ts×Da]`.
    pub keys: Var,
    /// Per-item `[Bm×Ts]` frame validity.
    pub mask: Vec<bool>,
    pub steps: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        query_dim: usize,
        key_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.add("attention.w1", glorot_uniform(rng, &[query_dim, attn_dim], query_dim, attn_dim), true),
            w2: store.add("attention.w2", glorot_uniform(rng, &[key_dim, attn_dim], key_dim, attn_dim), true),
            v: store.add("attention.v", glorot_uniform(rng, &[attn_dim, 1], attn_dim, 1), true),
            query_dim,
            key_dim,
            attn_dim,
        }
    }

    /// Projects `annotations: [B×Ts×Dk]` once per sequence.
    pub fn memory<T: Scalar>(&self, s: &mut Session<'_, T>, annotations: Var, mask: Vec<bool>) -> Result<AttentionMemory> {
        let (b, ts, dk) = match s.graph.shape(annotations) {
            [b, t, d] => (*b, *t, *d),
            sh => return Err(dim_err!("attention memory: expected [B, Ts, D], got {sh:?}")),
        };
        if dk != self.key_dim || mask.len() != b * ts {
            return Err(dim_err!("attention memory: annotations {:?} with {} mask flags", s.graph.shape(annotations), mask.len()));
        }
        let flat = s.graph.reshape(annotations, &[b * ts, dk])?;
        let w2 = s.p(self.w2);
        let keys = s.graph.matmul(flat, w2)?;
        let keys = s.graph.reshape(keys, &[b, ts, self.attn_dim])?;
        Ok(AttentionMemory { annotations, keys, mask, steps: ts })
    }

    /// Unnormalized scores `[B×Ts]` for `query: [B×Dq]`.
    pub fn scores<T: Scalar>(&self, s: &mut Session<'_, T>, query: Var, mem: &AttentionMemory) -> Result<Var> {
        let w1 = s.p(self.w1);
        let q = s.graph.matmul(query, w1)?;
        let rows = s.graph.shape(q)[0];
        let hidden = s.graph.add_broadcast_steps(mem.keys, q)?;
        let hidden = s.graph.tanh(hidden);
        let flat = s.graph.reshape(hidden, &[rows * mem.steps, self.attn_dim])?;
        let v = s.p(self.v);
        let e = s.graph.matmul(flat, v)?;
        s.graph.reshape(e, &[rows, mem.steps])
    }

    /// Returns `(context [B×Dk], alpha [B×Ts])`.
    pub fn attend<T: Scalar>(&self, s: &mut Session<'_, T>, query: Var, mem: &AttentionMemory) -> Result<(Var, Var)> {
        let e = self.scores(s, query, mem)?;
        let rows = s.graph.shape(e)[0];
        let mask = broadcast_mask(&mem.mask, mem.steps, rows)?;
        let alpha = s.graph.masked_softmax(e, &mask)?;
        let context = s.graph.weighted_sum(alpha, mem.annotations)?;
        Ok((context, alpha))
    }
}

/// Repeats a single-item mask over `rows` queries when the memory is shared.
fn broadcast_mask(mask: &[bool], steps: usize, rows: usize) -> Result<Vec<bool>> {
    if mask.len() == rows * steps {
        Ok(mask.to_vec())
    } else if mask.len() == steps {
        Ok(mask.iter().copied().cycle().take(rows * steps).collect())
    } else {
        Err(dim_err!("attention mask of {} flags for {rows} queries over {steps} frames", mask.len()))
    }
}
