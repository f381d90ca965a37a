use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{HtrError, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
/// Number of special tokens preceding the characters.
pub const SPECIALS: usize = 3;

/// Character vocabulary: `<pad>`, `<sos>`, `<eos>`, then characters in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for CharVocab {
    fn from(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + SPECIALS)).collect();
        Self { chars, index }
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.chars
    }
}

impl CharVocab {
    /// Characters in the given order; duplicates are a config error.
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        let unique: BTreeSet<char> = chars.iter().copied().collect();
        if unique.len() != chars.len() {
            return Err(HtrError::Config("vocabulary contains duplicate characters".into()));
        }
        Ok(Self::from(chars))
    }

    /// Sorted set of characters appearing in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::from(set.into_iter().collect::<Vec<_>>())
    }

    /// Total class count N, specials included.
    pub fn len(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn token(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, token: usize) -> Option<char> {
        token.checked_sub(SPECIALS).and_then(|i| self.chars.get(i)).copied()
    }

    /// Character tokens of `text`, without specials.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.token(c).ok_or_else(|| HtrError::Data(format!("character {c:?} not in vocabulary"))))
            .collect()
    }

    /// Text of `tokens` with specials dropped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens.iter().filter_map(|&t| self.char_of(t)).collect()
    }
}
