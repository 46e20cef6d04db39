//! Word-level vocabulary with byte fallback.
//!
//! Ids are dense from 0: reserved special tokens first, then the 256 byte
//! tokens, then corpus words ordered by descending frequency (ties broken
//! lexicographically). Tokenization is deterministic and round-trips
//! whitespace-normalized text exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::io::FileError;

/// Padding token, also used to fill tail chunks.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
/// End-of-document marker; generation truncates at its rendered form.
pub const EOD: u32 = 2;
pub const SYSTEM: u32 = 3;
pub const USER: u32 = 4;
pub const ASSISTANT: u32 = 5;

const BYTE_BASE: u32 = 6;
const WORD_BASE: u32 = BYTE_BASE + 256;

pub const PAD_TEXT: &str = "<pad>";
pub const BOS_TEXT: &str = "<bos>";
pub const EOD_TEXT: &str = "|<end-of-document>|";
pub const SYSTEM_TEXT: &str = "System:";
pub const USER_TEXT: &str = "User:";
pub const ASSISTANT_TEXT: &str = "Assistant:";

const SPECIAL_TEXTS: [&str; 6] = [
    PAD_TEXT,
    BOS_TEXT,
    EOD_TEXT,
    SYSTEM_TEXT,
    USER_TEXT,
    ASSISTANT_TEXT,
];

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error(transparent)]
    File(#[from] FileError),
    #[error("vocabulary file is empty or truncated")]
    Empty,
}

/// Token-to-id table. The id of a string is its line number in the saved file.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    strings: Vec<String>,
    map: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from document texts.
    ///
    /// Words seen fewer than `min_count` times fall back to byte tokens; the
    /// word list is capped at `max_words`.
    pub fn build<'a>(docs: impl Iterator<Item = &'a str>, min_count: usize, max_words: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for w in doc.split_whitespace() {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut base = Self::with_reserved();
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !base.map.contains_key(*w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_words);
        for (w, _) in ranked {
            let id = base.strings.len() as u32;
            base.strings.push(w.to_string());
            base.map.insert(w.to_string(), id);
        }
        base
    }

    fn with_reserved() -> Self {
        let mut strings = Vec::with_capacity(WORD_BASE as usize);
        for s in SPECIAL_TEXTS {
            strings.push(s.to_string());
        }
        for b in 0..=255u8 {
            strings.push(format!("<0x{b:02X}>"));
        }
        let map = strings
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { strings, map }
    }

    pub fn size(&self) -> usize {
        self.strings.len()
    }

    pub fn token_string(&self, id: u32) -> &str {
        &self.strings[id as usize]
    }

    /// Deterministic word-level encoding; unknown words become byte tokens.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            match self.map.get(w) {
                Some(&id) => ids.push(id),
                None => {
                    for &b in w.as_bytes() {
                        ids.push(BYTE_BASE + u32::from(b));
                    }
                }
            }
        }
        ids
    }

    /// Inverse of [`tokenize`](Self::tokenize) up to whitespace
    /// normalization. PAD is structural and renders as nothing.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut pending: Vec<u8> = Vec::new();
        for &id in ids {
            if (BYTE_BASE..WORD_BASE).contains(&id) {
                pending.push((id - BYTE_BASE) as u8);
                continue;
            }
            if !pending.is_empty() {
                words.push(String::from_utf8_lossy(&pending).into_owned());
                pending.clear();
            }
            if id == PAD {
                continue;
            }
            words.push(self.strings[id as usize].clone());
        }
        if !pending.is_empty() {
            words.push(String::from_utf8_lossy(&pending).into_owned());
        }
        words.join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut out = String::with_capacity(self.strings.len() * 8);
        for s in &self.strings {
            out.push_str(s);
            out.push('\n');
        }
        fs::write(path, out).map_err(FileError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path).map_err(FileError::from)?;
        let strings: Vec<String> = text.lines().map(str::to_string).collect();
        if strings.len() < WORD_BASE as usize {
            return Err(VocabError::Empty);
        }
        let map = strings
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Ok(Self { strings, map })
    }
}
