//! Inverted-file product-quantization index with graph-routed centroid
//! search.
//!
//! Train clusters a (possibly subsampled) embedding set, learns the OPQ
//! rotation and PQ codebooks on residuals, and builds the centroid graph.
//! Add assigns every database chunk to its exact nearest centroid and stores
//! its PQ code. Query routes through the graph to pick `nprobe` posting
//! lists, scores candidates either by PQ lookup tables or (with exact
//! re-ranking) by full stored embeddings, and returns ids sorted by
//! ascending distance with ties toward the lower id.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::hnsw::CentroidGraph;
use super::kmeans::{assign, kmeans};
use super::pq::{train_opq, ProductQuantizer, Rotation, CODES_PER_SUB};
use super::{sort_hits, ChunkDatabase, RetrievalError};
use crate::io::{self, FileError};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"RTIX";
const VERSION: u32 = 1;

/// Index construction parameters; defaults are the desk-scale analog of a
/// large IVF+graph+PQ configuration.
#[derive(Debug, Clone)]
pub struct IndexParams {
    pub ncentroids: usize,
    pub n_sub: usize,
    pub kmeans_iters: usize,
    pub pq_kmeans_iters: usize,
    pub opq_rounds: usize,
    pub graph_degree: usize,
    pub ef_construction: usize,
    /// Training subsample cap; the full set is used when smaller.
    pub train_sample_cap: usize,
    pub seed: u64,
    pub default_nprobe: usize,
    pub default_ef_search: usize,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            ncentroids: 1024,
            n_sub: 16,
            kmeans_iters: 15,
            pq_kmeans_iters: 10,
            opq_rounds: 3,
            graph_degree: 8,
            ef_construction: 64,
            train_sample_cap: 200_000,
            seed: 0,
            default_nprobe: 64,
            default_ef_search: 64,
        }
    }
}

/// Query-time breadth parameters.
#[derive(Debug, Clone, Copy)]
pub struct QueryOpts {
    /// Number of posting lists scanned.
    pub nprobe: usize,
    /// Beam width of the centroid graph search.
    pub ef_search: usize,
    /// Score scanned candidates with stored full embeddings instead of PQ
    /// codes. With `nprobe = ncentroids` this makes query results equal the
    /// brute-force oracle.
    pub exact_rerank: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u32,
    /// Negative inner product; ascending order is best-first.
    pub distance: f32,
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub hits: Vec<Hit>,
    /// Set when fewer than `k` candidates were available.
    pub truncated: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct PostingList {
    ids: Vec<u32>,
    codes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    pub dim: u32,
    pub n_sub: u32,
    rotation: Rotation,
    /// Rotated-space centroids, ncentroids x dim.
    centroids: Vec<f32>,
    pq: ProductQuantizer,
    graph: CentroidGraph,
    lists: Vec<PostingList>,
    populated: u64,
    pub default_nprobe: u32,
    pub default_ef_search: u32,
}

impl AnnIndex {
    pub fn ncentroids(&self) -> usize {
        self.lists.len()
    }

    pub fn populated(&self) -> u64 {
        self.populated
    }

    pub fn posting_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(|l| l.ids.len()).collect()
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.centroids[c * d..(c + 1) * d]
    }

    pub fn graph(&self) -> &CentroidGraph {
        &self.graph
    }

    /// Trains centroids, rotation, PQ codebooks, and the centroid graph.
    ///
    /// Training may run on a seeded uniform subsample; posting lists start
    /// empty.
    pub fn train(embeddings: &[f32], count: usize, dim: usize, params: &IndexParams) -> Result<Self, RetrievalError> {
        if params.ncentroids < 1 || params.ncentroids > count {
            return Err(RetrievalError::BadCentroidCount {
                ncentroids: params.ncentroids,
                points: count,
            });
        }
        let mut rng = Rng::for_stream(params.seed, "index-train");
        let sample_n = count.min(params.train_sample_cap).max(params.ncentroids);
        let sample: Vec<f32> = if sample_n == count {
            embeddings.to_vec()
        } else {
            let idx = rng.sample_indices(count, sample_n);
            let mut s = Vec::with_capacity(sample_n * dim);
            for i in idx {
                s.extend_from_slice(&embeddings[i * dim..(i + 1) * dim]);
            }
            s
        };

        let coarse = kmeans(&sample, sample_n, dim, params.ncentroids, params.kmeans_iters, &mut rng);
        let mut residuals = vec![0.0f32; sample_n * dim];
        for i in 0..sample_n {
            let c = coarse.assignments[i] as usize;
            for j in 0..dim {
                residuals[i * dim + j] = sample[i * dim + j] - coarse.centroids[c * dim + j];
            }
        }
        let (rotation, pq) = train_opq(
            &residuals,
            sample_n,
            dim,
            params.n_sub,
            params.pq_kmeans_iters,
            params.opq_rounds,
            &mut rng,
        );
        let centroids = rotation.apply_batch(&coarse.centroids, params.ncentroids);
        let graph = CentroidGraph::build(
            &centroids,
            params.ncentroids,
            dim,
            params.graph_degree,
            params.ef_construction,
            params.seed,
        );
        Ok(Self {
            dim: dim as u32,
            n_sub: params.n_sub as u32,
            rotation,
            centroids,
            pq,
            graph,
            lists: vec![PostingList::default(); params.ncentroids],
            populated: 0,
            default_nprobe: params.default_nprobe as u32,
            default_ef_search: params.default_ef_search as u32,
        })
    }

    /// Assigns every database chunk to its exact nearest centroid's posting
    /// list together with its PQ code.
    pub fn add(&mut self, db: &ChunkDatabase) -> Result<(), RetrievalError> {
        if self.populated > 0 {
            return Err(RetrievalError::AlreadyPopulated);
        }
        if db.dim != self.dim {
            return Err(RetrievalError::DimMismatch {
                query: db.dim as usize,
                index: self.dim as usize,
            });
        }
        let d = self.dim as usize;
        let n = db.len();
        let rotated = self.rotation.apply_batch(db.embeddings(), n);
        let (assignments, _) = assign(&rotated, n, d, &self.centroids, self.ncentroids());
        let mut residual = vec![0.0f32; d];
        for id in 0..n {
            let c = assignments[id] as usize;
            let y = &rotated[id * d..(id + 1) * d];
            for j in 0..d {
                residual[j] = y[j] - self.centroids[c * d + j];
            }
            let code = self.pq.encode(&residual);
            self.lists[c].ids.push(id as u32);
            self.lists[c].codes.extend_from_slice(&code);
        }
        self.populated = n as u64;
        Ok(())
    }

    /// Centroid probe order for a rotated query: graph-routed except in the
    /// exhaustive case.
    fn probe_order(&self, y: &[f32], nprobe: usize, ef_search: usize) -> Vec<u32> {
        if nprobe >= self.ncentroids() {
            return (0..self.ncentroids() as u32).collect();
        }
        let beam = ef_search.max(nprobe);
        let found = self.graph.search(&self.centroids, self.dim as usize, y, beam);
        found.into_iter().take(nprobe).map(|(id, _)| id).collect()
    }

    /// Top-k approximate nearest chunks.
    ///
    /// `db` is required when `opts.exact_rerank` is set; re-ranking scores
    /// every scanned candidate with its stored full embedding.
    pub fn query(
        &self,
        q: &[f32],
        k: usize,
        opts: &QueryOpts,
        db: Option<&ChunkDatabase>,
    ) -> Result<QueryOutcome, RetrievalError> {
        if self.populated == 0 {
            return Err(RetrievalError::NotPopulated);
        }
        if q.len() != self.dim as usize {
            return Err(RetrievalError::DimMismatch {
                query: q.len(),
                index: self.dim as usize,
            });
        }
        if opts.nprobe < 1 || opts.nprobe > self.ncentroids() {
            return Err(RetrievalError::BadNprobe {
                nprobe: opts.nprobe,
                ncentroids: self.ncentroids(),
            });
        }
        let rerank_db = if opts.exact_rerank {
            Some(db.ok_or(RetrievalError::RerankNeedsDatabase)?)
        } else {
            None
        };
        let d = self.dim as usize;
        let y = self.rotation.apply(q);
        let probes = self.probe_order(&y, opts.nprobe, opts.ef_search);
        let lut = if rerank_db.is_none() {
            Some(self.pq.dot_lut(&y))
        } else {
            None
        };
        let n_sub = self.n_sub as usize;
        let mut hits: Vec<Hit> = Vec::new();
        for &c in &probes {
            let list = &self.lists[c as usize];
            match (&lut, rerank_db) {
                (_, Some(db)) => {
                    for &id in &list.ids {
                        hits.push(Hit {
                            id,
                            distance: -crate::numerics::dot(q, db.embedding(id)),
                        });
                    }
                }
                (Some(lut), None) => {
                    let base = crate::numerics::dot(&y, &self.centroids[c as usize * d..(c as usize + 1) * d]);
                    for (slot, &id) in list.ids.iter().enumerate() {
                        let code = &list.codes[slot * n_sub..(slot + 1) * n_sub];
                        let mut score = base;
                        for (s, &cc) in code.iter().enumerate() {
                            score += lut[s * CODES_PER_SUB + cc as usize];
                        }
                        hits.push(Hit {
                            id,
                            distance: -score,
                        });
                    }
                }
                (None, None) => unreachable!(),
            }
        }
        sort_hits(&mut hits);
        let truncated = hits.len() < k;
        hits.truncate(k);
        Ok(QueryOutcome { hits, truncated })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(File::create(path).map_err(FileError::from)?);
        io::write_magic(&mut w, MAGIC, VERSION)?;
        io::write_u32(&mut w, self.dim)?;
        io::write_u32(&mut w, self.n_sub)?;
        io::write_u32(&mut w, self.ncentroids() as u32)?;
        io::write_u64(&mut w, self.populated)?;
        io::write_u32(&mut w, self.default_nprobe)?;
        io::write_u32(&mut w, self.default_ef_search)?;
        // Rotation
        io::write_f32_slice(&mut w, &self.rotation.mat)?;
        // Centroids
        io::write_f32_slice(&mut w, &self.centroids)?;
        // Codebooks
        io::write_u32(&mut w, self.pq.sub_dim as u32)?;
        io::write_f32_slice(&mut w, &self.pq.codebooks)?;
        // Graph
        io::write_u32(&mut w, self.graph.degree as u32)?;
        io::write_u32(&mut w, self.graph.max_level as u32)?;
        io::write_u32(&mut w, self.graph.entry)?;
        w.write_all(&self.graph.node_levels).map_err(FileError::from)?;
        io::write_u32(&mut w, self.graph.links.len() as u32)?;
        for level in &self.graph.links {
            for adj in level {
                io::write_u32(&mut w, adj.len() as u32)?;
                io::write_u32_slice(&mut w, adj)?;
            }
        }
        // Posting lists
        for list in &self.lists {
            io::write_u32(&mut w, list.ids.len() as u32)?;
            io::write_u32_slice(&mut w, &list.ids)?;
            w.write_all(&list.codes).map_err(FileError::from)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let mut r = BufReader::new(File::open(path).map_err(FileError::from)?);
        io::check_magic(&mut r, MAGIC, VERSION)?;
        let dim = io::read_u32(&mut r)?;
        let n_sub = io::read_u32(&mut r)?;
        let ncentroids = io::read_u32(&mut r)? as usize;
        let populated = io::read_u64(&mut r)?;
        let default_nprobe = io::read_u32(&mut r)?;
        let default_ef_search = io::read_u32(&mut r)?;
        let d = dim as usize;
        let rotation = Rotation {
            dim: d,
            mat: io::read_f32_vec(&mut r, d * d)?,
        };
        let centroids = io::read_f32_vec(&mut r, ncentroids * d)?;
        let sub_dim = io::read_u32(&mut r)? as usize;
        let codebooks = io::read_f32_vec(&mut r, n_sub as usize * CODES_PER_SUB * sub_dim)?;
        let pq = ProductQuantizer {
            n_sub: n_sub as usize,
            sub_dim,
            codebooks,
        };
        let degree = io::read_u32(&mut r)? as usize;
        let max_level = io::read_u32(&mut r)? as usize;
        let entry = io::read_u32(&mut r)?;
        let mut node_levels = vec![0u8; ncentroids];
        r.read_exact(&mut node_levels).map_err(FileError::from)?;
        let n_levels = io::read_u32(&mut r)? as usize;
        let mut links = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let mut level = Vec::with_capacity(ncentroids);
            for _ in 0..ncentroids {
                let len = io::read_u32(&mut r)? as usize;
                level.push(io::read_u32_vec(&mut r, len)?);
            }
            links.push(level);
        }
        let graph = CentroidGraph {
            degree,
            max_level,
            entry,
            node_levels,
            links,
        };
        let mut lists = Vec::with_capacity(ncentroids);
        for _ in 0..ncentroids {
            let len = io::read_u32(&mut r)? as usize;
            let ids = io::read_u32_vec(&mut r, len)?;
            let mut codes = vec![0u8; len * n_sub as usize];
            r.read_exact(&mut codes).map_err(FileError::from)?;
            lists.push(PostingList { ids, codes });
        }
        Ok(Self {
            dim,
            n_sub,
            rotation,
            centroids,
            pq,
            graph,
            lists,
            populated,
            default_nprobe,
            default_ef_search,
        })
    }
}
