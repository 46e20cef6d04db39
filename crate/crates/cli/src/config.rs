//! Flat key = value run configuration with command-line overrides.
//!
//! Values resolve in order: built-in defaults, then the `--config` file,
//! then `key=value` arguments. The resolved map is written verbatim into
//! each phase's manifest so experiment pairs diff cleanly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

/// A named configuration problem; `key` is the offending entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        let mut v = BTreeMap::new();
        let mut put = |k: &str, val: &str| {
            v.insert(k.to_string(), val.to_string());
        };
        put("seed", "0");
        put("precision", "f32");

        put("corpus.holdout_fraction", "0.01");
        put("corpus.min_count", "1");
        put("corpus.max_words", "65536");

        put("synth.passages", "2000");
        put("synth.facts_per_passage", "8");
        put("synth.payload_len", "8");
        put("synth.duplicates", "4");
        put("synth.passages_per_doc", "6");
        put("synth.filler_words", "300");
        put("synth.payload_words", "320");
        put("synth.entity_first", "140");
        put("synth.entity_second", "140");
        put("synth.eval_facts", "64");
        put("synth.sft_facts", "512");

        put("model.d_model", "128");
        put("model.n_layers", "4");
        put("model.n_heads", "4");
        put("model.max_seq", "256");
        put("model.chunk_size", "64");
        put("model.encoder_layers", "2");
        put("model.ff_mult", "4");
        put("model.gate", "1");

        // Retrieval during pretraining uses two neighbors per chunk.
        put("retrieval.k", "2");
        put("index.dim", "128");
        put("index.ncentroids", "1024");
        put("index.n_sub", "16");
        put("index.kmeans_iters", "15");
        put("index.pq_kmeans_iters", "10");
        put("index.opq_rounds", "3");
        put("index.graph_degree", "8");
        put("index.ef_construction", "64");
        put("index.sample_cap", "200000");
        put("index.nprobe", "64");
        put("index.ef_search", "64");
        put("index.exact_rerank", "true");

        put("train.steps", "200");
        put("train.batch", "8");
        put("train.peak_lr", "1e-3");
        put("train.min_lr", "1e-4");
        put("train.warmup_samples", "80");
        put("train.decay_samples", "8000");
        put("train.beta1", "0.9");
        put("train.beta2", "0.95");
        put("train.weight_decay", "0.01");
        put("train.clip_norm", "1.0");
        put("train.val_interval", "50");
        put("train.val_windows", "32");
        put("retrofit.freeze_decoder", "false");

        // Recorded full-scale fine-tuning recipe.
        put("sft.batch", "128");
        put("sft.lr", "5e-6");
        put("sft.steps", "1000");
        put("sft.weight_decay", "0.01");
        put("sft.beta1", "0.9");
        put("sft.beta2", "0.98");
        put("sft.prompt_k", "2");

        // Evaluation prompts carry five neighbors by default.
        put("eval.prompt_k", "5");
        put("eval.max_new", "256");
        put("eval.gate", "0");

        put("gen.max_new", "256");
        put("ppl.gate", "0");
        Self { values: v }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::defaults();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    cfg.set(k.trim(), v.trim());
                }
                None => {
                    return Err(CliError::Usage(format!(
                        "config line {} is not key = value: {line}",
                        i + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required config key {key}")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.require(key)?))
    }

    pub fn usize_(&self, key: &str) -> Result<usize, CliError> {
        self.require(key)?
            .parse()
            .map_err(|_| CliError::Usage(format!("config key {key} must be an integer")))
    }

    pub fn u64_(&self, key: &str) -> Result<u64, CliError> {
        self.require(key)?
            .parse()
            .map_err(|_| CliError::Usage(format!("config key {key} must be an integer")))
    }

    pub fn f64_(&self, key: &str) -> Result<f64, CliError> {
        self.require(key)?
            .parse()
            .map_err(|_| CliError::Usage(format!("config key {key} must be a number")))
    }

    pub fn bool_(&self, key: &str) -> Result<bool, CliError> {
        match self.require(key)? {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(CliError::Usage(format!(
                "config key {key} must be a boolean, got {other}"
            ))),
        }
    }

    pub fn gate(&self, key: &str) -> Result<u8, CliError> {
        match self.require(key)? {
            "1" | "on" => Ok(1),
            "0" | "off" => Ok(0),
            other => Err(CliError::Usage(format!(
                "config key {key} must be 0/1 (or on/off), got {other}"
            ))),
        }
    }

    /// Decoder layer indices carrying cross-attention; defaults to every
    /// third layer starting at the third.
    pub fn cca_layers(&self, n_layers: usize) -> Result<Vec<usize>, CliError> {
        match self.get("model.cca_layers") {
            None | Some("") | Some("default") => {
                Ok(minretro::model::RetroConfig::default_cca_layers(n_layers))
            }
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| CliError::Usage("bad model.cca_layers entry".into()))
                })
                .collect(),
        }
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Static validation for a command; an empty list means `run` would
    /// pass its precondition checks.
    pub fn validate(&self, command: &str) -> Vec<Problem> {
        let mut problems = Vec::new();
        let check_int = |key: &str, problems: &mut Vec<Problem>| {
            if let Some(v) = self.get(key) {
                if v.parse::<u64>().is_err() {
                    problems.push(Problem {
                        key: key.into(),
                        message: format!("must be an integer, got {v}"),
                    });
                }
            }
        };
        for key in [
            "model.d_model",
            "model.n_layers",
            "model.n_heads",
            "model.max_seq",
            "model.chunk_size",
            "train.steps",
            "train.batch",
            "sft.steps",
        ] {
            check_int(key, &mut problems);
        }
        let geti = |key: &str| self.get(key).and_then(|v| v.parse::<usize>().ok());
        if let (Some(m), Some(n)) = (geti("model.chunk_size"), geti("model.max_seq")) {
            if m == 0 || n % m != 0 {
                problems.push(Problem {
                    key: "model.chunk_size".into(),
                    message: "chunk size must divide sequence length".into(),
                });
            }
        }
        if let (Some(d), Some(h)) = (geti("model.d_model"), geti("model.n_heads")) {
            if h == 0 || d % h != 0 {
                problems.push(Problem {
                    key: "model.n_heads".into(),
                    message: "head count must divide the hidden width".into(),
                });
            }
        }
        if let Some(p) = self.get("precision") {
            if p != "f32" && p != "f64" {
                problems.push(Problem {
                    key: "precision".into(),
                    message: format!("must be f32 or f64, got {p}"),
                });
            }
        }
        if let Some(frac) = self.get("corpus.holdout_fraction") {
            match frac.parse::<f64>() {
                Ok(f) if f > 0.0 && f < 1.0 => {}
                _ => problems.push(Problem {
                    key: "corpus.holdout_fraction".into(),
                    message: "must be a fraction in (0, 1)".into(),
                }),
            }
        }

        let need = |key: &str, problems: &mut Vec<Problem>| {
            if self.get(key).is_none_or(str::is_empty) {
                problems.push(Problem {
                    key: key.into(),
                    message: "required for this command".into(),
                });
            }
        };
        match command {
            "prepare-corpus" => {
                need("out", &mut problems);
                if self.get("corpus.path").is_none_or(str::is_empty)
                    && self.get("corpus.synthetic").is_none_or(|v| v != "true")
                {
                    problems.push(Problem {
                        key: "corpus.path".into(),
                        message: "set corpus.path or corpus.synthetic = true".into(),
                    });
                }
            }
            "build-index" => {
                need("out", &mut problems);
                need("data.train", &mut problems);
            }
            "precompute-neighbors" => {
                need("out", &mut problems);
                need("data.dataset", &mut problems);
                need("data.db", &mut problems);
                need("data.index", &mut problems);
            }
            "pretrain" => {
                need("out", &mut problems);
                need("data.train", &mut problems);
            }
            "gpt-fit" => {
                need("out", &mut problems);
                need("data.train", &mut problems);
                need("data.ckpt", &mut problems);
            }
            "retrofit" => {
                need("out", &mut problems);
                need("data.train", &mut problems);
                need("data.ckpt", &mut problems);
                need("data.db", &mut problems);
                if self.get("data.neighbors").is_none_or(str::is_empty) {
                    problems.push(Problem {
                        key: "data.neighbors".into(),
                        message: "retro-fitting needs a precomputed neighbor file".into(),
                    });
                }
            }
            "sft" => {
                need("out", &mut problems);
                need("data.ckpt", &mut problems);
                need("data.vocab", &mut problems);
                if self.get("sft.samples").is_none_or(str::is_empty)
                    && self.get("sft.facts").is_none_or(str::is_empty)
                {
                    problems.push(Problem {
                        key: "sft.samples".into(),
                        message: "set sft.samples or sft.facts (with data.db/data.index)".into(),
                    });
                }
            }
            "eval" => {
                need("out", &mut problems);
                need("data.ckpt", &mut problems);
                need("data.vocab", &mut problems);
                need("eval.set", &mut problems);
            }
            "generate" => {
                need("data.ckpt", &mut problems);
                need("data.vocab", &mut problems);
                need("gen.prompt", &mut problems);
            }
            "ppl" => {
                need("out", &mut problems);
                need("data.ckpt", &mut problems);
                need("data.dataset", &mut problems);
            }
            _ => problems.push(Problem {
                key: "command".into(),
                message: format!("unknown command {command}"),
            }),
        }
        problems
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_neighbor_counts() {
        let cfg = RunConfig::defaults();
        // Two neighbors per chunk during pretraining, five in eval prompts.
        assert_eq!(cfg.get("retrieval.k"), Some("2"));
        assert_eq!(cfg.get("eval.prompt_k"), Some("5"));
    }

    #[test]
    fn chunk_misalignment_is_named() {
        let mut cfg = RunConfig::defaults();
        cfg.set("model.max_seq", "100");
        cfg.set("out", "x");
        cfg.set("data.train", "y");
        let problems = cfg.validate("pretrain");
        assert!(problems
            .iter()
            .any(|p| p.message.contains("chunk size must divide sequence length")));
    }

    #[test]
    fn missing_required_keys_are_named() {
        let cfg = RunConfig::defaults();
        let problems = cfg.validate("retrofit");
        let keys: Vec<&str> = problems.iter().map(|p| p.key.as_str()).collect();
        assert!(keys.contains(&"data.ckpt"));
        assert!(keys.contains(&"data.neighbors"));
    }

    #[test]
    fn valid_config_has_no_problems() {
        let mut cfg = RunConfig::defaults();
        cfg.set("out", "runs/pretrain");
        cfg.set("data.train", "runs/corpus/train.ds");
        assert!(cfg.validate("pretrain").is_empty());
    }

    #[test]
    fn unknown_command_is_a_problem() {
        let cfg = RunConfig::defaults();
        assert!(!cfg.validate("frobnicate").is_empty());
    }
}
