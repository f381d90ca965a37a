//! Error rates, the dataset format, a synthetic line generator and the
//! evaluation report.

pub mod dataset;
pub mod font;
pub mod metrics;
pub mod report;
pub mod synth;

pub use dataset::{Dataset, DatasetEntry, LINES_FILE};
pub use metrics::{cer, char_edits, levenshtein, wer, word_edits};
pub use report::{evaluate, evaluate_with, mode_label, EvalReport, LineResult};
pub use synth::{random_text, render, synth_generate, synth_lines, SynthConfig, SynthLine};
