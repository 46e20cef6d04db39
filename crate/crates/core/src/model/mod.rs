//! GPT decoder backbone, the shallow bidirectional neighbor encoder, gated
//! chunk-wise cross-attention, and the language-model loss.
//!
//! The gate is a non-trainable 0/1 switch. With gate 0 the cross-attention
//! subgraph is never built, so `retro_forward` is bitwise identical to
//! `gpt_forward` on the shared backbone weights and the encoder +
//! cross-attention parameters receive exactly zero gradient.

pub mod config;
mod params;

pub use config::RetroConfig;
pub use params::{load_checkpoint, save_checkpoint, ParamSet};

use crate::corpus::vocab::PAD;
use crate::numerics::{Array, NodeId, Scalar, Tape};
use crate::retrieval::{ChunkDatabase, NeighborFile};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    File(#[from] crate::io::FileError),
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds the model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence length {len} is not a multiple of chunk size {m}")]
    NotChunkAligned { len: usize, m: usize },
    #[error("gate is on but no neighbors were provided")]
    NeighborsMissing,
    #[error("neighbor batch mismatch: expected {expected} chunks, found {found}")]
    NeighborCount { expected: usize, found: usize },
    #[error("neighbor chunk must have {expected} tokens, found {found}")]
    NeighborLength { expected: usize, found: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("mask/target length {found} does not match logits rows {expected}")]
    MaskLength { expected: usize, found: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

/// Neighbor token chunks for one sequence: for each chunk index i in
/// 1..l (chunk 0 has none), the k neighbors retrieved for chunk i-1.
#[derive(Debug, Clone)]
pub struct NeighborBatch {
    pub k: usize,
    pub m: usize,
    /// (l-1) * k chunks; set j feeds decoder chunk j+1.
    pub chunks: Vec<Vec<u32>>,
}

impl NeighborBatch {
    pub fn sets(&self) -> usize {
        self.chunks.len() / self.k
    }

    /// Materializes neighbor tokens for one training window.
    ///
    /// `base_chunk` is the window's first chunk index in the neighbor file;
    /// `l` is the window's chunk count. Entry `base_chunk + i - 1` supplies
    /// decoder chunk `i`, which is the one-chunk offset that keeps
    /// generation causal.
    pub fn from_file(db: &ChunkDatabase, nf: &NeighborFile, base_chunk: usize, l: usize) -> Self {
        let k = nf.k as usize;
        let mut chunks = Vec::with_capacity(l.saturating_sub(1) * k);
        for i in 1..l {
            for &id in nf.entries(base_chunk + i - 1) {
                chunks.push(db.chunk(id).tokens.clone());
            }
        }
        Self {
            k,
            m: db.chunk_size as usize,
            chunks,
        }
    }

    /// Shuffles which neighbor set serves which chunk (control condition).
    pub fn shuffled(&self, rng: &mut Rng) -> Self {
        let sets = self.sets();
        let mut order: Vec<usize> = (0..sets).collect();
        rng.shuffle(&mut order);
        let mut chunks = Vec::with_capacity(self.chunks.len());
        for &s in &order {
            for j in 0..self.k {
                chunks.push(self.chunks[s * self.k + j].clone());
            }
        }
        Self {
            k: self.k,
            m: self.m,
            chunks,
        }
    }
}

/// Decoder + encoder + cross-attention weights for one model instance.
#[derive(Debug, Clone)]
pub struct RetroModel<T: Scalar> {
    pub config: RetroConfig,
    pub params: ParamSet<T>,
}

/// Parameter nodes leased onto a tape for one forward/backward pass,
/// aligned with `ParamSet` slot order.
pub struct Leased {
    ids: Vec<NodeId>,
    lookup: std::collections::HashMap<String, NodeId>,
}

impl Leased {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .lookup
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not found"))
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

impl<T: Scalar> RetroModel<T> {
    /// Seeded random initialization. Cross-attention output projections are
    /// zero so a freshly retro-fitted model starts exactly at its GPT
    /// backbone's function.
    pub fn init(config: RetroConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::for_stream(seed, "model-init");
        let mut p = ParamSet::new();
        let d = config.d_model;
        let ff = d * config.ff_mult;

        let mut randn = |p: &mut ParamSet<T>, name: &str, shape: &[usize]| {
            let arr = Array::randn(shape, INIT_STD, &mut rng);
            p.insert(name, arr);
        };
        let ones = |p: &mut ParamSet<T>, name: &str, len: usize| {
            p.insert(name, Array::from_vec(&[len], vec![T::one(); len]));
        };
        let zeros = |p: &mut ParamSet<T>, name: &str, shape: &[usize]| {
            p.insert(name, Array::zeros(shape));
        };

        randn(&mut p, "dec.tok_emb", &[config.vocab_size, d]);
        randn(&mut p, "dec.pos_emb", &[config.max_seq, d]);
        for l in 0..config.n_layers {
            let pre = format!("dec.layer{l}");
            ones(&mut p, &format!("{pre}.ln1.gain"), d);
            zeros(&mut p, &format!("{pre}.ln1.bias"), &[d]);
            for w in ["wq", "wk", "wv", "wo"] {
                randn(&mut p, &format!("{pre}.attn.{w}"), &[d, d]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                zeros(&mut p, &format!("{pre}.attn.{b}"), &[d]);
            }
            ones(&mut p, &format!("{pre}.ln2.gain"), d);
            zeros(&mut p, &format!("{pre}.ln2.bias"), &[d]);
            randn(&mut p, &format!("{pre}.mlp.w1"), &[d, ff]);
            zeros(&mut p, &format!("{pre}.mlp.b1"), &[ff]);
            randn(&mut p, &format!("{pre}.mlp.w2"), &[ff, d]);
            zeros(&mut p, &format!("{pre}.mlp.b2"), &[d]);
        }
        ones(&mut p, "dec.lnf.gain", d);
        zeros(&mut p, "dec.lnf.bias", &[d]);

        if config.is_retro() {
            randn(&mut p, "enc.pos_emb", &[config.chunk_size, d]);
            for l in 0..config.encoder_layers {
                let pre = format!("enc.layer{l}");
                ones(&mut p, &format!("{pre}.ln1.gain"), d);
                zeros(&mut p, &format!("{pre}.ln1.bias"), &[d]);
                for w in ["wq", "wk", "wv", "wo"] {
                    randn(&mut p, &format!("{pre}.attn.{w}"), &[d, d]);
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    zeros(&mut p, &format!("{pre}.attn.{b}"), &[d]);
                }
                ones(&mut p, &format!("{pre}.ln2.gain"), d);
                zeros(&mut p, &format!("{pre}.ln2.bias"), &[d]);
                randn(&mut p, &format!("{pre}.mlp.w1"), &[d, ff]);
                zeros(&mut p, &format!("{pre}.mlp.b1"), &[ff]);
                randn(&mut p, &format!("{pre}.mlp.w2"), &[ff, d]);
                zeros(&mut p, &format!("{pre}.mlp.b2"), &[d]);
            }
            ones(&mut p, "enc.lnf.gain", d);
            zeros(&mut p, "enc.lnf.bias", &[d]);

            for &l in &config.cca_layers {
                let pre = format!("cca.layer{l}");
                ones(&mut p, &format!("{pre}.ln.gain"), d);
                zeros(&mut p, &format!("{pre}.ln.bias"), &[d]);
                for w in ["wq", "wk", "wv"] {
                    randn(&mut p, &format!("{pre}.{w}"), &[d, d]);
                }
                for b in ["bq", "bk", "bv"] {
                    zeros(&mut p, &format!("{pre}.{b}"), &[d]);
                }
                // Zero output projection: cross-attention starts as identity.
                zeros(&mut p, &format!("{pre}.wo"), &[d, d]);
                zeros(&mut p, &format!("{pre}.bo"), &[d]);
            }
        }

        Ok(Self { config, params: p })
    }

    /// Loads a checkpoint into a model of exactly the stored config.
    pub fn from_checkpoint(path: &std::path::Path) -> Result<Self, ModelError> {
        let (config, stored) = load_checkpoint(path)?;
        let mut model = Self::init(config, 0)?;
        for slot in 0..model.params.len() {
            let name = model.params.name(slot).to_string();
            if !stored.contains(&name) {
                return Err(ModelError::CheckpointMismatch(format!(
                    "missing tensor {name}"
                )));
            }
            let src = stored.get(&name);
            copy_tensor(&name, src, model.params.at_mut(slot))?;
        }
        Ok(model)
    }

    /// Copies the decoder backbone from a (typically pure-GPT) checkpoint
    /// into this model; encoder and cross-attention weights keep their
    /// fresh initialization. The decoder architecture must match.
    pub fn load_backbone(&mut self, path: &std::path::Path) -> Result<(), ModelError> {
        let (src_cfg, stored) = load_checkpoint(path)?;
        let c = &self.config;
        if (src_cfg.vocab_size, src_cfg.d_model, src_cfg.n_layers, src_cfg.n_heads)
            != (c.vocab_size, c.d_model, c.n_layers, c.n_heads)
            || src_cfg.max_seq != c.max_seq
            || src_cfg.ff_mult != c.ff_mult
        {
            return Err(ModelError::CheckpointMismatch(format!(
                "decoder shape differs: checkpoint (v={}, d={}, L={}, h={}, n={}) vs model (v={}, d={}, L={}, h={}, n={})",
                src_cfg.vocab_size,
                src_cfg.d_model,
                src_cfg.n_layers,
                src_cfg.n_heads,
                src_cfg.max_seq,
                c.vocab_size,
                c.d_model,
                c.n_layers,
                c.n_heads,
                c.max_seq,
            )));
        }
        for slot in 0..self.params.len() {
            let name = self.params.name(slot).to_string();
            if !name.starts_with("dec.") {
                continue;
            }
            if !stored.contains(&name) {
                return Err(ModelError::CheckpointMismatch(format!(
                    "missing decoder tensor {name}"
                )));
            }
            copy_tensor(&name, stored.get(&name), self.params.at_mut(slot))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        save_checkpoint(path, &self.config, &self.params)
    }

    /// Leases every parameter onto the tape as a leaf.
    pub fn lease(&self, tape: &mut Tape<T>) -> Leased {
        let mut ids = Vec::with_capacity(self.params.len());
        let mut lookup = std::collections::HashMap::with_capacity(self.params.len());
        for slot in 0..self.params.len() {
            let id = tape.leaf(self.params.at(slot).clone());
            ids.push(id);
            lookup.insert(self.params.name(slot).to_string(), id);
        }
        Leased { ids, lookup }
    }

    /// Decoder-only forward: logits for every position.
    pub fn gpt_forward(
        &self,
        tape: &mut Tape<T>,
        leased: &Leased,
        tokens: &[u32],
    ) -> Result<NodeId, ModelError> {
        self.forward(tape, leased, tokens, None, 0)
    }

    /// Forward with retrieval: chunk i attends to the encoded neighbors of
    /// chunk i-1 when the gate is on. Gate 0 bypasses the encoder entirely.
    pub fn retro_forward(
        &self,
        tape: &mut Tape<T>,
        leased: &Leased,
        tokens: &[u32],
        neighbors: Option<&NeighborBatch>,
        gate: u8,
    ) -> Result<NodeId, ModelError> {
        self.forward(tape, leased, tokens, neighbors, gate)
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        leased: &Leased,
        tokens: &[u32],
        neighbors: Option<&NeighborBatch>,
        gate: u8,
    ) -> Result<NodeId, ModelError> {
        let c = &self.config;
        let t = tokens.len();
        if t == 0 || t > c.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: c.max_seq,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id: bad,
                vocab: c.vocab_size,
            });
        }

        let encoded = if gate == 1 && c.is_retro() {
            let nb = neighbors.ok_or(ModelError::NeighborsMissing)?;
            if t % c.chunk_size != 0 {
                return Err(ModelError::NotChunkAligned {
                    len: t,
                    m: c.chunk_size,
                });
            }
            let l = t / c.chunk_size;
            Some(self.encode_neighbors(tape, leased, nb, l)?)
        } else {
            None
        };

        let tok_emb = leased.node("dec.tok_emb");
        let mut x = tape.embed(tok_emb, tokens);
        let pos = leased.node("dec.pos_emb");
        let pos_slice = tape.slice_rows(pos, 0, t);
        x = tape.add(x, pos_slice);

        let mask = causal_mask::<T>(t);
        for l in 0..c.n_layers {
            let pre = format!("dec.layer{l}");
            let a = tape.layer_norm(
                x,
                leased.node(&format!("{pre}.ln1.gain")),
                leased.node(&format!("{pre}.ln1.bias")),
                T::from_double(LN_EPS),
            );
            let attn = self.attention(tape, leased, a, a, &format!("{pre}.attn"), Some(&mask));
            x = tape.add(x, attn);

            if let Some(ref kvs) = encoded {
                if c.cca_layers.contains(&l) {
                    x = self.chunked_cross_attention_inner(tape, leased, x, kvs, l);
                }
            }

            let b = tape.layer_norm(
                x,
                leased.node(&format!("{pre}.ln2.gain")),
                leased.node(&format!("{pre}.ln2.bias")),
                T::from_double(LN_EPS),
            );
            let h1 = tape.matmul(b, leased.node(&format!("{pre}.mlp.w1")));
            let h1 = tape.add_tiled(h1, leased.node(&format!("{pre}.mlp.b1")));
            let g = tape.gelu(h1);
            let h2 = tape.matmul(g, leased.node(&format!("{pre}.mlp.w2")));
            let h2 = tape.add_tiled(h2, leased.node(&format!("{pre}.mlp.b2")));
            x = tape.add(x, h2);
        }
        let xf = tape.layer_norm(
            x,
            leased.node("dec.lnf.gain"),
            leased.node("dec.lnf.bias"),
            T::from_double(LN_EPS),
        );
        // Tied output head.
        Ok(tape.matmul_nt(xf, tok_emb))
    }

    /// Encodes each neighbor chunk independently with the bidirectional
    /// encoder, then concatenates the k neighbors of every chunk index into
    /// one key/value block of k*m rows.
    ///
    /// Returns one node per decoder chunk index 1..l.
    pub fn encode_neighbors(
        &self,
        tape: &mut Tape<T>,
        leased: &Leased,
        nb: &NeighborBatch,
        l: usize,
    ) -> Result<Vec<NodeId>, ModelError> {
        let c = &self.config;
        let expected = (l - 1) * c.k_neighbors;
        if nb.chunks.len() != expected || nb.k != c.k_neighbors {
            return Err(ModelError::NeighborCount {
                expected,
                found: nb.chunks.len(),
            });
        }
        for chunk in &nb.chunks {
            if chunk.len() != c.chunk_size {
                return Err(ModelError::NeighborLength {
                    expected: c.chunk_size,
                    found: chunk.len(),
                });
            }
            if let Some(&bad) = chunk.iter().find(|&&id| id as usize >= c.vocab_size) {
                return Err(ModelError::TokenOutOfRange {
                    id: bad,
                    vocab: c.vocab_size,
                });
            }
        }

        let tok_emb = leased.node("dec.tok_emb");
        let enc_pos = leased.node("enc.pos_emb");
        let mut per_neighbor = Vec::with_capacity(nb.chunks.len());
        for chunk in &nb.chunks {
            let mut h = tape.embed(tok_emb, chunk);
            h = tape.add_tiled(h, enc_pos);
            for le in 0..c.encoder_layers {
                let pre = format!("enc.layer{le}");
                let a = tape.layer_norm(
                    h,
                    leased.node(&format!("{pre}.ln1.gain")),
                    leased.node(&format!("{pre}.ln1.bias")),
                    T::from_double(LN_EPS),
                );
                // Bidirectional: no mask.
                let attn = self.attention(tape, leased, a, a, &format!("{pre}.attn"), None);
                h = tape.add(h, attn);
                let b = tape.layer_norm(
                    h,
                    leased.node(&format!("{pre}.ln2.gain")),
                    leased.node(&format!("{pre}.ln2.bias")),
                    T::from_double(LN_EPS),
                );
                let h1 = tape.matmul(b, leased.node(&format!("{pre}.mlp.w1")));
                let h1 = tape.add_tiled(h1, leased.node(&format!("{pre}.mlp.b1")));
                let g = tape.gelu(h1);
                let h2 = tape.matmul(g, leased.node(&format!("{pre}.mlp.w2")));
                let h2 = tape.add_tiled(h2, leased.node(&format!("{pre}.mlp.b2")));
                h = tape.add(h, h2);
            }
            h = tape.layer_norm(
                h,
                leased.node("enc.lnf.gain"),
                leased.node("enc.lnf.bias"),
                T::from_double(LN_EPS),
            );
            per_neighbor.push(h);
        }

        let k = c.k_neighbors;
        let mut kvs = Vec::with_capacity(l - 1);
        for set in 0..l - 1 {
            kvs.push(tape.concat_rows(&per_neighbor[set * k..(set + 1) * k]));
        }
        Ok(kvs)
    }

    /// Applies gated chunk-wise cross-attention at layer `layer`.
    ///
    /// Positions in chunk i attend only to `kvs[i-1]` (the encoded neighbors
    /// of chunk i-1); chunk 0 passes through unchanged.
    fn chunked_cross_attention_inner(
        &self,
        tape: &mut Tape<T>,
        leased: &Leased,
        x: NodeId,
        kvs: &[NodeId],
        layer: usize,
    ) -> NodeId {
        let m = self.config.chunk_size;
        let l = tape.value(x).shape()[0] / m;
        let pre = format!("cca.layer{layer}");
        let mut blocks = Vec::with_capacity(l);
        blocks.push(tape.slice_rows(x, 0, m));
        for i in 1..l {
            let block = tape.slice_rows(x, i * m, m);
            let q = tape.layer_norm(
                block,
                leased.node(&format!("{pre}.ln.gain")),
                leased.node(&format!("{pre}.ln.bias")),
                T::from_double(LN_EPS),
            );
            let out = self.cross_attention(tape, leased, q, kvs[i - 1], &pre);
            blocks.push(tape.add(block, out));
        }
        tape.concat_rows(&blocks)
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        leased: &Leased,
        q_in: NodeId,
        kv_in: NodeId,
        prefix: &str,
        mask: Option<&Array<T>>,
    ) -> NodeId {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let q = tape.matmul(q_in, leased.node(&format!("{prefix}.wq")));
        let q = tape.add_tiled(q, leased.node(&format!("{prefix}.bq")));
        let k = tape.matmul(kv_in, leased.node(&format!("{prefix}.wk")));
        let k = tape.add_tiled(k, leased.node(&format!("{prefix}.bk")));
        let v = tape.matmul(kv_in, leased.node(&format!("{prefix}.wv")));
        let v = tape.add_tiled(v, leased.node(&format!("{prefix}.bv")));
        let qh = tape.split_heads(q, heads);
        let kh = tape.split_heads(k, heads);
        let vh = tape.split_heads(v, heads);
        let mut scores = tape.batch_matmul_nt(qh, kh);
        scores = tape.scale(scores, T::from_double(1.0 / (dh as f64).sqrt()));
        if let Some(mask) = mask {
            scores = tape.add_const(scores, mask);
        }
        let probs = tape.softmax(scores);
        let ctx = tape.batch_matmul(probs, vh);
        let merged = tape.merge_heads(ctx);
        let out = tape.matmul(merged, leased.node(&format!("{prefix}.wo")));
        tape.add_tiled(out, leased.node(&format!("{prefix}.bo")))
    }

    /// Multi-head cross-attention of decoder queries over encoded neighbor
    /// keys/values; output projection is `wo`/`bo` (zero at init).
    fn cross_attention(
        &self,
        tape: &mut Tape<T>,
        leased: &Leased,
        q_in: NodeId,
        kv: NodeId,
        prefix: &str,
    ) -> NodeId {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let q = tape.matmul(q_in, leased.node(&format!("{prefix}.wq")));
        let q = tape.add_tiled(q, leased.node(&format!("{prefix}.bq")));
        let k = tape.matmul(kv, leased.node(&format!("{prefix}.wk")));
        let k = tape.add_tiled(k, leased.node(&format!("{prefix}.bk")));
        let v = tape.matmul(kv, leased.node(&format!("{prefix}.wv")));
        let v = tape.add_tiled(v, leased.node(&format!("{prefix}.bv")));
        let qh = tape.split_heads(q, heads);
        let kh = tape.split_heads(k, heads);
        let vh = tape.split_heads(v, heads);
        let mut scores = tape.batch_matmul_nt(qh, kh);
        scores = tape.scale(scores, T::from_double(1.0 / (dh as f64).sqrt()));
        let probs = tape.softmax(scores);
        let ctx = tape.batch_matmul(probs, vh);
        let merged = tape.merge_heads(ctx);
        let out = tape.matmul(merged, leased.node(&format!("{prefix}.wo")));
        tape.add_tiled(out, leased.node(&format!("{prefix}.bo")))
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// value (exact-zero softmax weight) above it.
pub fn causal_mask<T: Scalar>(t: usize) -> Array<T> {
    let mut mask = Array::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            mask.row_mut(i)[j] = T::mask_neg();
        }
    }
    mask
}

/// Mean negative log-likelihood over positions where `mask` is set.
///
/// `targets[i]` is the label for position i; masked-out labels cannot
/// influence the loss.
pub fn lm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    targets: &[u32],
    mask: &[bool],
) -> Result<NodeId, ModelError> {
    let rows = tape.value(logits).shape()[0];
    if targets.len() != rows || mask.len() != rows {
        return Err(ModelError::MaskLength {
            expected: rows,
            found: targets.len().min(mask.len()),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::EmptyMask);
    }
    Ok(tape.cross_entropy(logits, targets, mask))
}

/// Next-token targets and a non-PAD loss mask for a training window.
///
/// Position i predicts token i+1; the final position is masked out.
pub fn shift_targets(tokens: &[u32]) -> (Vec<u32>, Vec<bool>) {
    let t = tokens.len();
    let mut targets = vec![0u32; t];
    let mut mask = vec![false; t];
    for i in 0..t.saturating_sub(1) {
        targets[i] = tokens[i + 1];
        mask[i] = tokens[i + 1] != PAD;
    }
    (targets, mask)
}

fn copy_tensor<T: Scalar>(name: &str, src: &Array<f64>, dst: &mut Array<T>) -> Result<(), ModelError> {
    if src.shape() != dst.shape() {
        return Err(ModelError::CheckpointMismatch(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d = T::from_double(s);
    }
    Ok(())
}
