//! Chunk embedding, the key-value retrieval database, the IVF-PQ index with
//! graph-routed centroid search, and neighbor precomputation.

pub mod embed;
mod hnsw;
mod index;
mod kmeans;
mod neighbors;
mod pq;

pub use hnsw::CentroidGraph;
pub use index::{AnnIndex, Hit, IndexParams, QueryOpts, QueryOutcome};
pub use kmeans::{kmeans, KMeansResult};
pub use neighbors::{precompute_neighbors, NeighborFile};
pub use pq::{ProductQuantizer, Rotation};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::corpus::{split_chunks, Chunk, Provenance, TokenDataset};
use crate::io::{self, FileError};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error(transparent)]
    File(#[from] FileError),
    #[error("cannot build a database from an empty dataset")]
    EmptyDatabase,
    #[error("ncentroids {ncentroids} must be in 1..={points} (training points)")]
    BadCentroidCount { ncentroids: usize, points: usize },
    #[error("index is already populated; adding twice would duplicate chunk ids")]
    AlreadyPopulated,
    #[error("index must be populated before querying")]
    NotPopulated,
    #[error("nprobe {nprobe} must be in 1..={ncentroids}")]
    BadNprobe { nprobe: usize, ncentroids: usize },
    #[error("exact re-ranking requires the chunk database")]
    RerankNeedsDatabase,
    #[error(
        "database too small: only {found} same-document-filtered neighbors for chunk {chunk} (need {need})"
    )]
    NotEnoughNeighbors { chunk: usize, found: usize, need: usize },
    #[error("embedding dim mismatch: query {query} vs index {index}")]
    DimMismatch { query: usize, index: usize },
}

/// Key-value retrieval database: values are token chunks, keys are their
/// unit-norm embeddings. Chunk ids are offsets into the arrays.
#[derive(Debug, Clone)]
pub struct ChunkDatabase {
    pub chunk_size: u32,
    pub dim: u32,
    pub embed_seed: u64,
    chunks: Vec<Chunk>,
    embeddings: Vec<f32>,
}

impl ChunkDatabase {
    /// Builds one entry per chunk of every training-provenance document.
    ///
    /// Held-out documents are excluded so validation text never enters the
    /// retrieval database.
    pub fn build(dataset: &TokenDataset, dim: usize, embed_seed: u64) -> Result<Self, RetrievalError> {
        let m = dataset.chunk_size as usize;
        let mut chunks = Vec::new();
        let mut embeddings = Vec::new();
        for doc in &dataset.documents {
            if doc.provenance != Provenance::Train {
                continue;
            }
            for chunk in split_chunks(doc, m) {
                embeddings.extend_from_slice(&embed::embed_chunk(&chunk.tokens, dim, embed_seed));
                chunks.push(chunk);
            }
        }
        if chunks.is_empty() {
            return Err(RetrievalError::EmptyDatabase);
        }
        Ok(Self {
            chunk_size: dataset.chunk_size,
            dim: dim as u32,
            embed_seed,
            chunks,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunk(&self, id: u32) -> &Chunk {
        &self.chunks[id as usize]
    }

    pub fn doc_of(&self, id: u32) -> u32 {
        self.chunks[id as usize].doc_id
    }

    pub fn embedding(&self, id: u32) -> &[f32] {
        let d = self.dim as usize;
        &self.embeddings[id as usize * d..(id as usize + 1) * d]
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    /// Embeds query tokens with the database's own dim and seed.
    pub fn embed_query(&self, tokens: &[u32]) -> Vec<f32> {
        embed::embed_chunk(tokens, self.dim as usize, self.embed_seed)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(File::create(path).map_err(FileError::from)?);
        io::write_magic(&mut w, b"RTDB", 1)?;
        io::write_u32(&mut w, self.chunk_size)?;
        io::write_u32(&mut w, self.dim)?;
        io::write_u64(&mut w, self.embed_seed)?;
        io::write_u64(&mut w, self.chunks.len() as u64)?;
        for c in &self.chunks {
            io::write_u32(&mut w, c.doc_id)?;
            io::write_u32(&mut w, c.ordinal)?;
            io::write_u32_slice(&mut w, &c.tokens)?;
        }
        io::write_f32_slice(&mut w, &self.embeddings)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let mut r = BufReader::new(File::open(path).map_err(FileError::from)?);
        io::check_magic(&mut r, b"RTDB", 1)?;
        let chunk_size = io::read_u32(&mut r)?;
        let dim = io::read_u32(&mut r)?;
        let embed_seed = io::read_u64(&mut r)?;
        let count = io::read_u64(&mut r)? as usize;
        let mut chunks = Vec::with_capacity(count);
        for _ in 0..count {
            let doc_id = io::read_u32(&mut r)?;
            let ordinal = io::read_u32(&mut r)?;
            let tokens = io::read_u32_vec(&mut r, chunk_size as usize)?;
            chunks.push(Chunk {
                doc_id,
                ordinal,
                tokens,
            });
        }
        let embeddings = io::read_f32_vec(&mut r, count * dim as usize)?;
        Ok(Self {
            chunk_size,
            dim,
            embed_seed,
            chunks,
            embeddings,
        })
    }
}

/// Exact top-k by inner product over all database embeddings.
///
/// Ties break toward the lower chunk id. This is the oracle that the
/// approximate index is measured against.
pub fn brute_force_query(db: &ChunkDatabase, q: &[f32], k: usize) -> Vec<Hit> {
    assert_eq!(
        q.len(),
        db.dim as usize,
        "query dim {} vs database dim {}",
        q.len(),
        db.dim
    );
    let mut scored: Vec<Hit> = (0..db.len() as u32)
        .map(|id| Hit {
            id,
            distance: -crate::numerics::dot(q, db.embedding(id)),
        })
        .collect();
    sort_hits(&mut scored);
    scored.truncate(k);
    scored
}

/// Ascending distance, ties toward the lower chunk id.
pub(crate) fn sort_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .expect("non-finite retrieval distance")
            .then(a.id.cmp(&b.id))
    });
}
