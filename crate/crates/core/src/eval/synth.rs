use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::LINES_FILE;
use super::font::{glyph, GLYPH_H, GLYPH_W};
use crate::error::{HtrError, Result};
use crate::training::write_atomic;
use crate::vision::{normalize_gray, LineImage, LINE_HEIGHT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub alphabet: Vec<char>,
    pub lines: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    /// Integer upscaling of the 5×7 glyphs (3 gives 21-pixel-tall letters).
    pub scale: usize,
    /// Gaussian pixel noise, in units of full intensity.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            alphabet: ('a'..='z').chain([' ']).chain('0'..='9').collect(),
            lines: 32,
            min_words: 1,
            max_words: 3,
            min_word_len: 2,
            max_word_len: 6,
            scale: 3,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.alphabet.iter().find(|&&c| glyph(c).is_none()) {
            return Err(HtrError::Config(format!("character {c:?} has no glyph")));
        }
        if !self.alphabet.iter().any(|&c| c != ' ') {
            return Err(HtrError::Config("alphabet needs at least one non-space character".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words || self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return Err(HtrError::Config("word count and length ranges must be non-empty and start at 1 or more".into()));
        }
        if self.scale == 0 || GLYPH_H * self.scale + 4 > LINE_HEIGHT {
            return Err(HtrError::Config(format!("glyph scale {} does not fit a {LINE_HEIGHT}-pixel line", self.scale)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(HtrError::Config("noise sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One synthesized line: 8-bit dark-on-light pixels and its transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLine {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub text: String,
}

impl SynthLine {
    /// The normalized network input, transcript attached.
    pub fn to_line_image(&self) -> Result<LineImage> {
        Ok(normalize_gray(self.width, self.height, &self.pixels)?.with_transcript(self.text.clone()))
    }
}

pub fn random_text<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> String {
    let letters: Vec<char> = cfg.alphabet.iter().copied().filter(|&c| c != ' ').collect();
    let spaced = cfg.alphabet.contains(&' ');
    let words = if spaced { rng.random_range(cfg.min_words..=cfg.max_words) } else { 1 };
    (0..words)
        .map(|_| {
            let n = rng.random_range(cfg.min_word_len..=cfg.max_word_len);
            (0..n).map(|_| letters[rng.random_range(0..letters.len())]).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Draws `text` with per-glyph jitter in position and spacing, then adds
/// pixel noise.
pub fn render<R: Rng + ?Sized>(text: &str, cfg: &SynthConfig, rng: &mut R) -> Result<SynthLine> {
    let s = cfg.scale;
    let glyphs: Vec<&[u8; 7]> = text
        .chars()
        .map(|c| glyph(c).ok_or_else(|| HtrError::Config(format!("character {c:?} has no glyph"))))
        .collect::<Result<_>>()?;
    let advance = (GLYPH_W + 1) * s;
    let margin = 4;
    let width = (2 * margin + glyphs.len() * (advance + 2)).max(crate::vision::MIN_WIDTH);
    let height = LINE_HEIGHT;
    let mut ink = vec![0f64; width * height];
    let base_top = (height - GLYPH_H * s) / 2;
    let mut x0 = margin;
    for g in glyphs {
        let top = (base_top as i64 + rng.random_range(-1..=1)).max(0) as usize;
        let strength = rng.random_range(0.75..=1.0);
        for (gy, bits) in g.iter().enumerate() {
            for gx in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - gx) & 1 == 1 {
                    for dy in 0..s {
                        for dx in 0..s {
                            let (y, x) = (top + gy * s + dy, x0 + gx * s + dx);
                            if y < height && x < width {
                                ink[y * width + x] = strength;
                            }
                        }
                    }
                }
            }
        }
        x0 += advance + rng.random_range(0..=2);
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("validated sigma");
    let pixels = ink
        .iter()
        .map(|&v| {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (255.0 * (1.0 - v + n)).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(SynthLine { width, height, pixels, text: text.to_string() })
}

/// Lines drawn from the seeded generator, without touching the file system.
pub fn synth_lines(cfg: &SynthConfig) -> Result<Vec<SynthLine>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.lines)
        .map(|_| {
            let text = random_text(cfg, &mut rng);
            render(&text, cfg, &mut rng)
        })
        .collect()
}

/// Writes `lines.tsv` and one PGM image per line into `dir`.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<()> {
    let lines = synth_lines(cfg)?;
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, line) in lines.iter().enumerate() {
        let name = format!("line_{i:05}.pgm");
        crate::vision::write_pgm(&dir.join(&name), line.width, line.height, &line.pixels)?;
        writeln!(index, "{name}\t{}", line.text).expect("string write");
    }
    write_atomic(&dir.join(LINES_FILE), index.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcripts_use_alphabet() {
        let cfg = SynthConfig { alphabet: "abc ".chars().collect(), lines: 20, ..SynthConfig::default() };
        for l in synth_lines(&cfg).unwrap() {
            assert!(l.text.chars().all(|c| "abc ".contains(c)));
            assert!(!l.text.starts_with(' ') && !l.text.ends_with(' '));
            assert_eq!(l.height, 32);
        }
    }

    #[test]
    fn unsupported_character() {
        let cfg = SynthConfig { alphabet: vec!['a', 'Q'], ..SynthConfig::default() };
        assert!(matches!(synth_lines(&cfg), Err(HtrError::Config(_))));
    }

    #[test]
    fn different_text_different_image() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..SynthConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ab = render("ab", &cfg, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ba = render("ba", &cfg, &mut rng).unwrap();
        assert_ne!(ab.pixels, ba.pixels);
    }
}
