use crate::error::{contract_err, Result};

/// Edit distance with unit-cost insertions, deletions and substitutions.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, x) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in short.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(diag + 1).min(row[j] + 1);
        }
    }
    row[short.len()]
}

pub fn char_edits(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    levenshtein(&r, &h)
}

pub fn word_edits(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    levenshtein(&r, &h)
}

/// Character edits over reference length (spaces count as characters).
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(contract_err!("CER of an empty reference"));
    }
    Ok(char_edits(reference, hypothesis) as f64 / n as f64)
}

/// Word edits over reference word count; words are whitespace-separated runs.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let n = reference.split_whitespace().count();
    if n == 0 {
        return Err(contract_err!("WER of a reference without words"));
    }
    Ok(word_edits(reference, hypothesis) as f64 / n as f64)
}
