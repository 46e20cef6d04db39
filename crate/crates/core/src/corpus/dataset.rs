//! Binary token dataset file.
//!
//! Layout: magic `RTDS`, version, vocab size, chunk size m, document count,
//! then per-document records (doc id, provenance byte, length, token ids as
//! little-endian u32).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{CorpusError, Provenance, TokenSequence};
use crate::io::{self, FileError};

const MAGIC: &[u8; 4] = b"RTDS";
const VERSION: u32 = 1;

/// In-memory token dataset plus the header fields of its file form.
#[derive(Debug, Clone)]
pub struct TokenDataset {
    pub vocab_size: u32,
    pub chunk_size: u32,
    pub documents: Vec<TokenSequence>,
}

impl TokenDataset {
    pub fn new(
        vocab_size: u32,
        chunk_size: u32,
        documents: Vec<TokenSequence>,
    ) -> Result<Self, CorpusError> {
        for doc in &documents {
            if let Some(&id) = doc.ids.iter().find(|&&id| id >= vocab_size) {
                return Err(CorpusError::TokenOutOfRange {
                    id,
                    vocab: vocab_size,
                });
            }
        }
        Ok(Self {
            vocab_size,
            chunk_size,
            documents,
        })
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(|d| d.ids.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path).map_err(FileError::from)?);
        io::write_magic(&mut w, MAGIC, VERSION)?;
        io::write_u32(&mut w, self.vocab_size)?;
        io::write_u32(&mut w, self.chunk_size)?;
        io::write_u64(&mut w, self.documents.len() as u64)?;
        for doc in &self.documents {
            io::write_u32(&mut w, doc.doc_id)?;
            let tag = match doc.provenance {
                Provenance::Train => 0u32,
                Provenance::Heldout => 1u32,
            };
            io::write_u32(&mut w, tag)?;
            io::write_u32(&mut w, doc.ids.len() as u32)?;
            io::write_u32_slice(&mut w, &doc.ids)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let mut r = BufReader::new(File::open(path).map_err(FileError::from)?);
        io::check_magic(&mut r, MAGIC, VERSION)?;
        let vocab_size = io::read_u32(&mut r)?;
        let chunk_size = io::read_u32(&mut r)?;
        let count = io::read_u64(&mut r)? as usize;
        let mut documents = Vec::with_capacity(count);
        for _ in 0..count {
            let doc_id = io::read_u32(&mut r)?;
            let provenance = match io::read_u32(&mut r)? {
                0 => Provenance::Train,
                1 => Provenance::Heldout,
                other => {
                    return Err(CorpusError::File(FileError::Corrupt(format!(
                        "unknown provenance tag {other}"
                    ))))
                }
            };
            let len = io::read_u32(&mut r)? as usize;
            let ids = io::read_u32_vec(&mut r, len)?;
            documents.push(TokenSequence {
                doc_id,
                ids,
                provenance,
            });
        }
        Self::new(vocab_size, chunk_size, documents)
    }
}
