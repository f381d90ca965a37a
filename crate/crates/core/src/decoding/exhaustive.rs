use super::{rank, Decoded, StepModel};
use crate::error::{contract_err, Result};

pub const MAX_ORACLE_CLASSES: usize = 5;
pub const MAX_ORACLE_LEN: usize = 6;

/// Scores every `<eos>`-terminated sequence of at most `max_len` tokens
/// (the `<eos>` included) and returns the most probable one; ties go to the
/// lexicographically smallest sequence.
pub fn exhaustive_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Decoded> {
    let n = model.num_classes();
    if n > MAX_ORACLE_CLASSES || max_len > MAX_ORACLE_LEN || max_len == 0 {
        return Err(contract_err!(
            "exhaustive search limited to N <= {MAX_ORACLE_CLASSES}, 1 <= max_len <= {MAX_ORACLE_LEN} (got N={n}, max_len={max_len})"
        ));
    }
    let init = model.initial()?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut prefix = Vec::new();
    search(model, &init, None, 0.0, &mut prefix, max_len, &mut best)?;
    let (log_prob, mut tokens) = best.ok_or_else(|| contract_err!("model can never emit <eos>"))?;
    tokens.pop();
    Ok(Decoded { tokens, log_prob, finished: true, step_probs: Vec::new() })
}

fn search<M: StepModel>(
    model: &mut M,
    state: &M::State,
    prev: Option<usize>,
    score: f64,
    prefix: &mut Vec<usize>,
    max_len: usize,
    best: &mut Option<(f64, Vec<usize>)>,
) -> Result<()> {
    let (lp, next) = model.step(state, prev.as_ref().map(std::slice::from_ref))?;
    let eos = model.eos();
    for t in 0..model.num_classes() {
        if !model.emittable(t) {
            continue;
        }
        let s = score + lp[0][t];
        prefix.push(t);
        if t == eos {
            let better = best.as_ref().map_or(true, |(bs, bt)| rank((s, prefix), (*bs, bt)).is_lt());
            if better {
                *best = Some((s, prefix.clone()));
            }
        } else if prefix.len() < max_len {
            let child = model.select(&next, &[0])?;
            search(model, &child, Some(t), s, prefix, max_len, best)?;
        }
        prefix.pop();
    }
    Ok(())
}
