//! Greedy decoding and generation truncation.

use super::EvalError;
use crate::corpus::vocab::{EOD, EOD_TEXT, USER, USER_TEXT};
use crate::model::{NeighborBatch, RetroModel};
use crate::numerics::{Scalar, Tape};
use crate::retrieval::{AnnIndex, ChunkDatabase, QueryOpts};

/// Greedy argmax decoding with the encoder bypassed (gate 0).
///
/// Stops at `max_new` tokens, at the context window, or right after an
/// end-of-document or user role-switch token. Returns only the generated
/// tokens.
pub fn greedy_decode<T: Scalar>(
    model: &RetroModel<T>,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>, EvalError> {
    decode_inner(model, prompt, max_new, None)
}

/// Greedy decoding with the encoder gate on: as each chunk completes, its
/// top-k neighbors are retrieved and fed to the encoder for the next chunk.
pub fn greedy_decode_with_encoder<T: Scalar>(
    model: &RetroModel<T>,
    prompt: &[u32],
    max_new: usize,
    db: &ChunkDatabase,
    index: &AnnIndex,
    opts: &QueryOpts,
) -> Result<Vec<u32>, EvalError> {
    decode_inner(model, prompt, max_new, Some((db, index, opts)))
}

fn decode_inner<T: Scalar>(
    model: &RetroModel<T>,
    prompt: &[u32],
    max_new: usize,
    retrieval: Option<(&ChunkDatabase, &AnnIndex, &QueryOpts)>,
) -> Result<Vec<u32>, EvalError> {
    let max_seq = model.config.max_seq;
    if prompt.is_empty() || prompt.len() >= max_seq {
        return Err(EvalError::PromptTooLong {
            len: prompt.len(),
            max: max_seq,
        });
    }
    let m = model.config.chunk_size;
    let k = model.config.k_neighbors;
    let gate_on = retrieval.is_some() && model.config.is_retro();
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    let mut neighbors = NeighborBatch {
        k,
        m,
        chunks: Vec::new(),
    };
    for _ in 0..max_new {
        if tokens.len() >= max_seq {
            break;
        }
        let next = if gate_on {
            let (db, index, opts) = retrieval.unwrap();
            // Chunks whose predecessors are complete need neighbor sets.
            let l = tokens.len().div_ceil(m);
            while neighbors.sets() < l - 1 {
                let done = neighbors.sets(); // next set serves chunk done+1
                let query_chunk = &tokens[done * m..(done + 1) * m];
                let q = db.embed_query(query_chunk);
                let hits = index.query(&q, k, opts, Some(db))?;
                if hits.hits.len() < k {
                    return Err(EvalError::Retrieval(
                        crate::retrieval::RetrievalError::NotEnoughNeighbors {
                            chunk: done,
                            found: hits.hits.len(),
                            need: k,
                        },
                    ));
                }
                for h in &hits.hits {
                    neighbors.chunks.push(db.chunk(h.id).tokens.clone());
                }
            }
            argmax_next(model, &tokens, Some(&neighbors), 1)?
        } else {
            argmax_next(model, &tokens, None, 0)?
        };
        tokens.push(next);
        out.push(next);
        if next == EOD || next == USER {
            break;
        }
    }
    Ok(out)
}

fn argmax_next<T: Scalar>(
    model: &RetroModel<T>,
    tokens: &[u32],
    nb: Option<&NeighborBatch>,
    gate: u8,
) -> Result<u32, EvalError> {
    let mut tape = Tape::new();
    let leased = model.lease(&mut tape);
    let logits = model.retro_forward(&mut tape, &leased, tokens, nb, gate)?;
    let last = tape.value(logits).row(tokens.len() - 1);
    let mut best = 0usize;
    let mut best_v = last[0];
    for (i, &v) in last.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    Ok(best as u32)
}

/// Cuts generated text at the first end-of-document marker or user
/// role-switch, whichever comes first, and strips trailing whitespace.
/// Idempotent.
pub fn truncate_generation(text: &str) -> String {
    let mut cut = text.len();
    if let Some(p) = text.find(EOD_TEXT) {
        cut = cut.min(p);
    }
    if let Some(p) = text.find(USER_TEXT) {
        cut = cut.min(p);
    }
    text[..cut].trim_end().to_string()
}
