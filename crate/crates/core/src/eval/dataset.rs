use std::path::{Path, PathBuf};

use crate::error::{HtrError, Result};
use crate::vision::{prepare_line_image, LineImage};

pub const LINES_FILE: &str = "lines.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    /// Image path relative to the dataset root.
    pub path: String,
    pub transcript: String,
}

/// A directory with `lines.tsv` (`relative_path<TAB>transcript` per line).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let index = root.join(LINES_FILE);
        let text = std::fs::read_to_string(&index)
            .map_err(|e| HtrError::Data(format!("cannot read {}: {e}", index.display())))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let (path, transcript) = line
                .split_once('\t')
                .ok_or_else(|| HtrError::Data(format!("{}:{}: expected path<TAB>transcript", index.display(), n + 1)))?;
            entries.push(DatasetEntry { path: path.to_string(), transcript: transcript.to_string() });
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, entry: &DatasetEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Loads, inverts and rescales one entry, attaching its transcript.
    pub fn load(&self, entry: &DatasetEntry) -> Result<LineImage> {
        Ok(prepare_line_image(&self.image_path(entry))?.with_transcript(entry.transcript.clone()))
    }

    /// Every readable line, plus `(path, reason)` for the ones that failed.
    pub fn load_all(&self) -> (Vec<LineImage>, Vec<(String, String)>) {
        let mut ok = Vec::with_capacity(self.len());
        let mut bad = Vec::new();
        for e in &self.entries {
            match self.load(e) {
                Ok(img) => ok.push(img),
                Err(err) => bad.push((e.path.clone(), err.to_string())),
            }
        }
        (ok, bad)
    }
}
