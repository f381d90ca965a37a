use super::{rank, Decoded, StepModel};
use crate::error::{HtrError, Result};

#[derive(Debug, Clone)]
struct Hyp {
    /// Includes the final `<eos>` once finished.
    tokens: Vec<usize>,
    score: f64,
    finished: bool,
    row: usize,
}

/// Prefixes (with `<eos>` where emitted) kept after each step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeamTrace {
    pub kept: Vec<Vec<Vec<usize>>>,
}

impl BeamTrace {
    /// Whether `sequence` (given with its `<eos>`) or one of its prefixes
    /// was dropped from the beam at some step.
    pub fn pruned(&self, sequence: &[usize]) -> bool {
        self.kept.iter().enumerate().any(|(t, kept)| {
            let prefix = &sequence[..(t + 1).min(sequence.len())];
            !kept.iter().any(|k| k[..] == *prefix)
        })
    }
}

pub fn beam_search<M: StepModel>(model: &mut M, k: usize, max_len: usize) -> Result<Decoded> {
    beam_search_traced(model, k, max_len).map(|(d, _)| d)
}

/// Beam search over raw joint log-probability. Finished hypotheses stay in
/// the pool with frozen scores; the search ends when every kept hypothesis
/// has emitted `<eos>` or after `max_len` steps.
pub fn beam_search_traced<M: StepModel>(model: &mut M, k: usize, max_len: usize) -> Result<(Decoded, BeamTrace)> {
    let n = model.num_classes();
    if k < 1 || k > n {
        return Err(HtrError::Config(format!("beam size {k} outside 1..={n}")));
    }
    if max_len == 0 {
        return Err(HtrError::Config("max_len must be at least 1".into()));
    }
    let eos = model.eos();
    let mut trace = BeamTrace::default();
    let init = model.initial()?;
    let (lp, mut state) = model.step(&init, None)?;
    let mut pool: Vec<Hyp> = (0..n)
        .filter(|&t| model.emittable(t))
        .map(|t| Hyp { tokens: vec![t], score: lp[0][t], finished: t == eos, row: 0 })
        .collect();
    pool.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
    pool.truncate(k);
    trace.kept.push(pool.iter().map(|h| h.tokens.clone()).collect());

    for _ in 1..max_len {
        let open: Vec<usize> = (0..pool.len()).filter(|&i| !pool[i].finished).collect();
        if open.is_empty() {
            break;
        }
        let rows: Vec<usize> = open.iter().map(|&i| pool[i].row).collect();
        let prev: Vec<usize> = open.iter().map(|&i| *pool[i].tokens.last().expect("non-empty")).collect();
        let sub = model.select(&state, &rows)?;
        let (lp, next) = model.step(&sub, Some(&prev))?;
        let mut cand: Vec<Hyp> = pool.iter().filter(|h| h.finished).cloned().collect();
        for (r, &i) in open.iter().enumerate() {
            let h = &pool[i];
            for t in (0..n).filter(|&t| model.emittable(t)) {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                cand.push(Hyp { tokens, score: h.score + lp[r][t], finished: t == eos, row: r });
            }
        }
        cand.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
        cand.truncate(k);
        pool = cand;
        state = next;
        trace.kept.push(pool.iter().map(|h| h.tokens.clone()).collect());
    }

    let best = pool.iter().find(|h| h.finished).unwrap_or(&pool[0]);
    let mut tokens = best.tokens.clone();
    if best.finished {
        tokens.pop();
    }
    Ok((Decoded { tokens, log_prob: best.score, finished: best.finished, step_probs: Vec::new() }, trace))
}
