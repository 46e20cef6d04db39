//! Neighbor precomputation for training and the flat neighbor id file.
//!
//! For every chunk of every training window, the top-k retrieved chunk ids
//! are stored after filtering out candidates from the query's own document;
//! filtered slots are backfilled from the next-ranked candidates. The model
//! later reads entry `i-1` when generating chunk `i`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{AnnIndex, ChunkDatabase, QueryOpts, RetrievalError};
use crate::corpus::{windows, TokenDataset};
use crate::io::{self, FileError};

const MAGIC: &[u8; 4] = b"RTNB";
const VERSION: u32 = 1;

/// Flat neighbor table: `count` chunks x `k` ids, in window order.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborFile {
    pub k: u32,
    pub chunk_size: u32,
    pub ids: Vec<u32>,
}

impl NeighborFile {
    pub fn count(&self) -> usize {
        self.ids.len() / self.k as usize
    }

    /// The k neighbor ids of the `chunk_index`-th chunk in window order.
    pub fn entries(&self, chunk_index: usize) -> &[u32] {
        let k = self.k as usize;
        &self.ids[chunk_index * k..(chunk_index + 1) * k]
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(File::create(path).map_err(FileError::from)?);
        io::write_magic(&mut w, MAGIC, VERSION)?;
        io::write_u32(&mut w, self.k)?;
        io::write_u32(&mut w, self.chunk_size)?;
        io::write_u64(&mut w, self.count() as u64)?;
        io::write_u32_slice(&mut w, &self.ids)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let mut r = BufReader::new(File::open(path).map_err(FileError::from)?);
        io::check_magic(&mut r, MAGIC, VERSION)?;
        let k = io::read_u32(&mut r)?;
        let chunk_size = io::read_u32(&mut r)?;
        let count = io::read_u64(&mut r)? as usize;
        let ids = io::read_u32_vec(&mut r, count * k as usize)?;
        Ok(Self {
            k,
            chunk_size,
            ids,
        })
    }
}

/// Retrieves and stores the top-k same-document-filtered neighbors for every
/// chunk of every training window of `dataset`.
pub fn precompute_neighbors(
    db: &ChunkDatabase,
    index: &AnnIndex,
    dataset: &TokenDataset,
    seq_len: usize,
    k: usize,
    opts: &QueryOpts,
) -> Result<NeighborFile, RetrievalError> {
    let m = db.chunk_size as usize;
    assert!(seq_len % m == 0, "sequence length {seq_len} must be a multiple of chunk size {m}");
    let mut ids: Vec<u32> = Vec::new();
    let mut chunk_counter = 0usize;
    for doc in &dataset.documents {
        for window in windows(&doc.ids, seq_len) {
            for chunk_tokens in window.chunks(m) {
                let q = db.embed_query(chunk_tokens);
                let picked = filtered_top_k(db, index, &q, doc.doc_id, k, opts, chunk_counter)?;
                ids.extend_from_slice(&picked);
                chunk_counter += 1;
            }
        }
    }
    Ok(NeighborFile {
        k: k as u32,
        chunk_size: db.chunk_size,
        ids,
    })
}

fn filtered_top_k(
    db: &ChunkDatabase,
    index: &AnnIndex,
    q: &[f32],
    query_doc: u32,
    k: usize,
    opts: &QueryOpts,
    chunk_counter: usize,
) -> Result<Vec<u32>, RetrievalError> {
    let fetch = (k + 64).min(db.len());
    let outcome = index.query(q, fetch, opts, Some(db))?;
    let mut picked: Vec<u32> = outcome
        .hits
        .iter()
        .filter(|h| db.doc_of(h.id) != query_doc)
        .take(k)
        .map(|h| h.id)
        .collect();
    if picked.len() < k {
        // Widen to an exhaustive scan before giving up.
        let exhaustive = QueryOpts {
            nprobe: index.ncentroids(),
            ef_search: opts.ef_search,
            exact_rerank: true,
        };
        let outcome = index.query(q, db.len(), &exhaustive, Some(db))?;
        picked = outcome
            .hits
            .iter()
            .filter(|h| db.doc_of(h.id) != query_doc)
            .take(k)
            .map(|h| h.id)
            .collect();
    }
    if picked.len() < k {
        return Err(RetrievalError::NotEnoughNeighbors {
            chunk: chunk_counter,
            found: picked.len(),
            need: k,
        });
    }
    Ok(picked)
}
