use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::dataset::Dataset;
use super::metrics::{cer, char_edits, wer, word_edits};
use crate::decoding::{recognize, DecodeMode};
use crate::error::Result;
use crate::tensor::Scalar;
use crate::training::write_atomic;
use crate::transducer::Model;
use crate::vision::LineImage;

#[derive(Debug, Clone, PartialEq)]
pub struct LineResult {
    pub path: String,
    pub reference: String,
    pub hypothesis: String,
    pub char_edits: usize,
    pub word_edits: usize,
    pub cer: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub lines: Vec<LineResult>,
    /// `(path, reason)` of every line that could not be scored.
    pub skipped: Vec<(String, String)>,
    pub mean_cer: f64,
    pub mean_wer: f64,
    pub mode: String,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

impl EvalReport {
    pub fn from_lines(lines: Vec<LineResult>, skipped: Vec<(String, String)>, mode: String) -> Self {
        let n = lines.len() as f64;
        let mean = |f: fn(&LineResult) -> f64| if lines.is_empty() { f64::NAN } else { lines.iter().map(f).sum::<f64>() / n };
        let (mean_cer, mean_wer) = (mean(|l| l.cer), mean(|l| l.wer));
        Self { lines, skipped, mean_cer, mean_wer, mode }
    }

    /// Total hypothesis characters over total reference characters; values
    /// well below 1 expose a bias toward short outputs.
    pub fn length_ratio(&self) -> f64 {
        let r: usize = self.lines.iter().map(|l| l.reference.chars().count()).sum();
        let h: usize = self.lines.iter().map(|l| l.hypothesis.chars().count()).sum();
        h as f64 / r.max(1) as f64
    }

    pub fn summary(&self) -> String {
        format!("# mean_cer={} mean_wer={}", self.mean_cer, self.mean_wer)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("path\tref\thyp\tcer\twer\n");
        for l in &self.lines {
            writeln!(out, "{}\t{}\t{}\t{}\t{}", escape(&l.path), escape(&l.reference), escape(&l.hypothesis), l.cer, l.wer).expect("string write");
        }
        writeln!(out, "{}", self.summary()).expect("string write");
        writeln!(out, "# mode={} lines={} skipped={} length_ratio={:.4}", self.mode, self.lines.len(), self.skipped.len(), self.length_ratio())
            .expect("string write");
        for (p, why) in &self.skipped {
            writeln!(out, "# skipped\t{}\t{}", escape(p), escape(why)).expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }
}

/// Scores a dataset with any line recognizer. Lines whose image cannot be
/// read, or whose transcript has no characters, are tallied as skipped.
pub fn evaluate_with<F>(dataset: &Dataset, mode: &str, recognize_line: F) -> EvalReport
where
    F: Fn(&LineImage) -> Result<String> + Sync,
{
    let outcomes: Vec<std::result::Result<LineResult, (String, String)>> = dataset
        .entries
        .par_iter()
        .map(|e| {
            let fail = |err: crate::HtrError| (e.path.clone(), err.to_string());
            let img = dataset.load(e).map_err(fail)?;
            let hyp = recognize_line(&img).map_err(fail)?;
            let c = cer(&e.transcript, &hyp).map_err(fail)?;
            let w = wer(&e.transcript, &hyp).map_err(fail)?;
            Ok(LineResult {
                path: e.path.clone(),
                reference: e.transcript.clone(),
                char_edits: char_edits(&e.transcript, &hyp),
                word_edits: word_edits(&e.transcript, &hyp),
                hypothesis: hyp,
                cer: c,
                wer: w,
            })
        })
        .collect();
    let mut lines = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(l) => lines.push(l),
            Err(s) => skipped.push(s),
        }
    }
    EvalReport::from_lines(lines, skipped, mode.to_string())
}

pub fn mode_label(mode: DecodeMode, classes: usize) -> String {
    match mode {
        DecodeMode::Greedy => "greedy".into(),
        DecodeMode::Beam(k) => format!("beam{}", k.unwrap_or(classes)),
    }
}

/// Decodes every line of `dataset` with `model`.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, mode: DecodeMode) -> EvalReport {
    let label = mode_label(mode, model.num_classes());
    evaluate_with(dataset, &label, |img| recognize(model, img, mode).map(|r| r.text))
}
