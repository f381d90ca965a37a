use super::{Decoded, StepModel};
use crate::error::{HtrError, Result};

/// Feeds back the most probable token (lowest index on ties) until `<eos>`
/// or `max_len` steps.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(HtrError::Config("max_len must be at least 1".into()));
    }
    let eos = model.eos();
    let mut state = model.initial()?;
    let mut prev: Option<usize> = None;
    let mut out = Decoded { tokens: Vec::new(), log_prob: 0.0, finished: false, step_probs: Vec::new() };
    for _ in 0..max_len {
        let (lp, next) = model.step(&state, prev.as_ref().map(std::slice::from_ref))?;
        let row = &lp[0];
        let best = (0..row.len())
            .filter(|&t| model.emittable(t))
            .fold(None, |acc: Option<usize>, t| match acc {
                Some(b) if row[b] >= row[t] => Some(b),
                _ => Some(t),
            })
            .ok_or_else(|| HtrError::Config("model has no emittable tokens".into()))?;
        out.log_prob += row[best];
        out.step_probs.push(row[best].exp());
        if best == eos {
            out.finished = true;
            break;
        }
        out.tokens.push(best);
        prev = Some(best);
        state = next;
    }
    Ok(out)
}
