//! Zero-shot evaluation: greedy generation with truncation rules, RAG
//! prompt construction, perplexity, and answer metrics.

mod decode;
mod metrics;
mod prompt;

pub use decode::{greedy_decode, greedy_decode_with_encoder, truncate_generation};
pub use metrics::{normalize_answer, qa_metrics, rouge_geo, rouge_scores};
pub use prompt::{
    extract_answer, format_rag_prompt, render_user_turn, ContextBlock, PromptTemplate,
    RenderedPrompt,
};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{windows, TokenDataset, Vocabulary};
use crate::model::{lm_loss, shift_targets, ModelError, NeighborBatch, RetroModel};
use crate::numerics::{Scalar, Tape};
use crate::retrieval::{AnnIndex, ChunkDatabase, NeighborFile, QueryOpts, RetrievalError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    File(#[from] crate::io::FileError),
    #[error("bad eval record on line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("prompt of {len} tokens does not fit the context window of {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("eval record on line {line} has no references")]
    NoReferences { line: usize },
    #[error("validation set has no scoreable positions")]
    EmptyValidation,
    #[error("gate is on but no retrieval (database + neighbor file) was supplied")]
    NeighborsRequired,
}

/// Exponential of the mean negative log-likelihood over non-PAD target
/// positions of every window in `dataset`.
///
/// With `gate` on, neighbors come from the precomputed file using the
/// previous-chunk offset. `max_windows` caps the evaluation for quick
/// validation passes.
pub fn perplexity<T: Scalar>(
    model: &RetroModel<T>,
    dataset: &TokenDataset,
    retrieval: Option<(&ChunkDatabase, &NeighborFile)>,
    gate: u8,
    max_windows: Option<usize>,
) -> Result<f64, EvalError> {
    let n = model.config.max_seq;
    let l = model.config.chunks_per_seq();
    if gate == 1 && model.config.is_retro() && retrieval.is_none() {
        return Err(EvalError::NeighborsRequired);
    }
    let mut total_nll = 0.0f64;
    let mut total_positions = 0usize;
    let mut base_chunk = 0usize;
    let mut seen = 0usize;
    'outer: for doc in &dataset.documents {
        for window in windows(&doc.ids, n) {
            if max_windows.is_some_and(|cap| seen >= cap) {
                break 'outer;
            }
            let (targets, mask) = shift_targets(&window);
            let active = mask.iter().filter(|&&m| m).count();
            if active > 0 {
                let mut tape = Tape::new();
                let leased = model.lease(&mut tape);
                let nb;
                let nb_ref = match retrieval {
                    Some((db, nf)) if gate == 1 && model.config.is_retro() => {
                        nb = NeighborBatch::from_file(db, nf, base_chunk, l);
                        Some(&nb)
                    }
                    _ => None,
                };
                let logits = model.retro_forward(&mut tape, &leased, &window, nb_ref, gate)?;
                let loss = lm_loss(&mut tape, logits, &targets, &mask)?;
                total_nll += tape.value(loss).item().to_double() * active as f64;
                total_positions += active;
            }
            base_chunk += l;
            seen += 1;
        }
    }
    if total_positions == 0 {
        return Err(EvalError::EmptyValidation);
    }
    Ok((total_nll / total_positions as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    ShortQa,
    LongQa,
    Summarization,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::ShortQa => "short_qa",
            TaskType::LongQa => "long_qa",
            TaskType::Summarization => "summarization",
        }
    }
}

/// One line-delimited evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalExample {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub references: Vec<String>,
    pub task: TaskType,
}

/// Loads a line-delimited eval set, requiring at least one reference per
/// record.
pub fn load_eval_set(path: &Path) -> Result<Vec<EvalExample>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(crate::io::FileError::from)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: EvalExample =
            serde_json::from_str(line).map_err(|source| EvalError::Json { line: i + 1, source })?;
        if ex.references.is_empty() {
            return Err(EvalError::NoReferences { line: i + 1 });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn save_eval_set(path: &Path, examples: &[EvalExample]) -> Result<(), EvalError> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&serde_json::to_string(ex).expect("serializable record"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(crate::io::FileError::from)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Neighbors concatenated into the prompt.
    pub prompt_k: usize,
    /// Neighbors fed to the encoder when the gate is on.
    pub encoder_gate: u8,
    pub max_new: usize,
    pub max_prompt_tokens: usize,
    pub nprobe: usize,
    pub ef_search: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompt_k: 5,
            encoder_gate: 0,
            max_new: 256,
            max_prompt_tokens: 4096,
            nprobe: 64,
            ef_search: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub index: usize,
    pub task: TaskType,
    pub prediction: String,
    pub em: f64,
    pub f1: f64,
    pub rouge: f64,
    pub dropped_neighbors: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Mean of a task's headline metric.
    pub fn mean(&self, task: TaskType) -> Option<f64> {
        let picked: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.task == task)
            .map(|r| match task {
                TaskType::ShortQa => r.em,
                TaskType::LongQa => r.f1,
                TaskType::Summarization => r.rouge,
            })
            .collect();
        if picked.is_empty() {
            None
        } else {
            Some(picked.iter().sum::<f64>() / picked.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,task,em,f1,rouge_geo,dropped_neighbors,prediction\n");
        for r in &self.rows {
            let pred = r.prediction.replace('"', "''").replace('\n', " ");
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4},{},\"{}\"",
                r.index,
                r.task.as_str(),
                r.em,
                r.f1,
                r.rouge,
                r.dropped_neighbors,
                pred
            );
        }
        out
    }

    /// One JSON object per task/metric pair.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let pairs: [(TaskType, &str); 4] = [
            (TaskType::ShortQa, "em"),
            (TaskType::ShortQa, "f1"),
            (TaskType::LongQa, "f1"),
            (TaskType::Summarization, "rouge_geo"),
        ];
        for (task, metric) in pairs {
            let picked: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.task == task)
                .map(|r| match metric {
                    "em" => r.em,
                    "f1" => r.f1,
                    _ => r.rouge,
                })
                .collect();
            if picked.is_empty() {
                continue;
            }
            let mean = picked.iter().sum::<f64>() / picked.len() as f64;
            let _ = writeln!(
                out,
                "{{\"task\": \"{}\", \"metric\": \"{}\", \"mean\": {:.4}, \"count\": {}}}",
                task.as_str(),
                metric,
                mean,
                picked.len()
            );
        }
        out
    }
}

/// Runs zero-shot evaluation: RAG prompt, greedy decode, truncation,
/// answer extraction, and per-task metrics.
pub fn evaluate<T: Scalar>(
    model: &RetroModel<T>,
    vocab: &Vocabulary,
    examples: &[EvalExample],
    retrieval: Option<(&ChunkDatabase, &AnnIndex)>,
    template: &PromptTemplate,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let mut rows = Vec::with_capacity(examples.len());
    let budget = cfg
        .max_prompt_tokens
        .min(model.config.max_seq.saturating_sub(cfg.max_new.min(16) + 1));
    for (index, ex) in examples.iter().enumerate() {
        let blocks: Vec<ContextBlock> = match (&ex.context, retrieval) {
            (Some(ctx), _) => vec![ContextBlock {
                title: String::new(),
                source: ctx.clone(),
            }],
            (None, Some((db, ann))) => {
                let q = db.embed_query(&vocab.tokenize(&ex.question));
                let opts = QueryOpts {
                    nprobe: cfg.nprobe.min(ann.ncentroids()).max(1),
                    ef_search: cfg.ef_search,
                    exact_rerank: false,
                };
                let hits = ann.query(&q, cfg.prompt_k, &opts, None)?;
                hits.hits
                    .iter()
                    .map(|h| ContextBlock {
                        title: String::new(),
                        source: vocab.detokenize(&db.chunk(h.id).tokens),
                    })
                    .collect()
            }
            (None, None) => Vec::new(),
        };
        let rendered = format_rag_prompt(&ex.question, &blocks, template, vocab, budget);
        let prompt_tokens = vocab.tokenize(&rendered.text);
        let generated = if cfg.encoder_gate == 1 {
            let (db, ann) = retrieval.ok_or(EvalError::NeighborsRequired)?;
            let opts = QueryOpts {
                nprobe: cfg.nprobe.min(ann.ncentroids()).max(1),
                ef_search: cfg.ef_search,
                exact_rerank: false,
            };
            greedy_decode_with_encoder(model, &prompt_tokens, cfg.max_new, db, ann, &opts)?
        } else {
            greedy_decode(model, &prompt_tokens, cfg.max_new)?
        };
        let text = truncate_generation(&vocab.detokenize(&generated));
        let answer = extract_answer(&text, template);
        let (em, f1) = qa_metrics(&answer, &ex.references);
        let rouge = rouge_geo(&answer, &ex.references);
        rows.push(EvalRow {
            index,
            task: ex.task,
            prediction: answer,
            em,
            f1,
            rouge,
            dropped_neighbors: rendered.dropped_neighbors,
        });
    }
    Ok(EvalReport { rows })
}
