//! Model architecture configuration.

use std::collections::BTreeMap;

use super::ModelError;

/// Decoder + neighbor-encoder architecture description.
///
/// `cca_layers` lists the decoder layers (0-based) that carry chunk-wise
/// cross-attention; an empty list is a pure GPT configuration. The encoder
/// always shares the decoder hidden width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetroConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum sequence length n.
    pub max_seq: usize,
    /// Chunk size m; must divide `max_seq`.
    pub chunk_size: usize,
    /// Neighbors per chunk fed to the encoder.
    pub k_neighbors: usize,
    pub encoder_layers: usize,
    pub cca_layers: Vec<usize>,
    /// Default gate value; 0 bypasses the encoder entirely.
    pub gate: u8,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
}

impl RetroConfig {
    /// Cross-attention placement default: every 3rd decoder layer starting
    /// at the 3rd (0-based indices 2, 5, 8, ...).
    pub fn default_cca_layers(n_layers: usize) -> Vec<usize> {
        (2..n_layers).step_by(3).collect()
    }

    pub fn is_retro(&self) -> bool {
        !self.cca_layers.is_empty()
    }

    /// Chunks per full-length sequence.
    pub fn chunks_per_seq(&self) -> usize {
        self.max_seq / self.chunk_size
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadConfig(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 {
            return fail("vocab_size, d_model, and n_layers must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.chunk_size == 0 || self.max_seq % self.chunk_size != 0 {
            return fail(format!(
                "chunk size {} must divide sequence length {}",
                self.chunk_size, self.max_seq
            ));
        }
        if self.gate > 1 {
            return fail(format!("gate must be 0 or 1, got {}", self.gate));
        }
        if let Some(&bad) = self.cca_layers.iter().find(|&&l| l >= self.n_layers) {
            return fail(format!(
                "cross-attention layer {bad} out of range for {} decoder layers",
                self.n_layers
            ));
        }
        if self.is_retro() && (self.encoder_layers == 0 || self.k_neighbors == 0) {
            return fail("retro configs need encoder_layers >= 1 and k_neighbors >= 1".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let cca: Vec<String> = self.cca_layers.iter().map(|l| l.to_string()).collect();
        format!(
            "vocab_size = {}\nd_model = {}\nn_layers = {}\nn_heads = {}\nmax_seq = {}\nchunk_size = {}\nk_neighbors = {}\nencoder_layers = {}\ncca_layers = {}\ngate = {}\nff_mult = {}\n",
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.max_seq,
            self.chunk_size,
            self.k_neighbors,
            self.encoder_layers,
            cca.join(","),
            self.gate,
            self.ff_mult,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<usize, ModelError> {
            map.get(k)
                .ok_or_else(|| ModelError::BadConfig(format!("missing config key {k}")))?
                .parse()
                .map_err(|_| ModelError::BadConfig(format!("bad value for config key {k}")))
        };
        let cca_layers = match map.get("cca_layers").map(String::as_str) {
            None | Some("") => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| ModelError::BadConfig("bad cca_layers entry".into()))
                })
                .collect::<Result<Vec<usize>, _>>()?,
        };
        let cfg = Self {
            vocab_size: get("vocab_size")?,
            d_model: get("d_model")?,
            n_layers: get("n_layers")?,
            n_heads: get("n_heads")?,
            max_seq: get("max_seq")?,
            chunk_size: get("chunk_size")?,
            k_neighbors: get("k_neighbors")?,
            encoder_layers: get("encoder_layers")?,
            cca_layers,
            gate: get("gate")? as u8,
            ff_mult: get("ff_mult")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
