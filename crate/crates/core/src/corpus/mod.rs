//! Tokenization, chunking, corpus splits, and the on-disk token dataset.

mod dataset;
pub mod vocab;

pub use dataset::TokenDataset;
pub use vocab::Vocabulary;

use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    File(#[from] crate::io::FileError),
    #[error(transparent)]
    Vocab(#[from] vocab::VocabError),
    #[error("holdout fraction {fraction} of {docs} documents selects no validation documents")]
    EmptyValidation { fraction: f64, docs: usize },
    #[error("holdout fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("token id {id} exceeds vocabulary size {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },
    #[error("dataset has no documents")]
    EmptyDataset,
}

/// Whether a document feeds training (and the retrieval database) or is
/// held out for validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Train,
    Heldout,
}

/// One tokenized document.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub doc_id: u32,
    pub ids: Vec<u32>,
    pub provenance: Provenance,
}

/// Fixed-length token span; the unit of retrieval keys and cross-attention
/// alignment. Tail chunks are right-padded with PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub doc_id: u32,
    pub ordinal: u32,
    pub tokens: Vec<u32>,
}

/// Splits a sequence into `ceil(len / m)` chunks of exactly `m` tokens.
///
/// The concatenation of the chunks minus tail padding reproduces the input.
pub fn split_chunks(seq: &TokenSequence, m: usize) -> Vec<Chunk> {
    assert!(m >= 1, "chunk size must be >= 1");
    let mut chunks = Vec::with_capacity(seq.ids.len().div_ceil(m));
    for (ordinal, piece) in seq.ids.chunks(m).enumerate() {
        let mut tokens = piece.to_vec();
        tokens.resize(m, vocab::PAD);
        chunks.push(Chunk {
            doc_id: seq.doc_id,
            ordinal: ordinal as u32,
            tokens,
        });
    }
    chunks
}

/// Inverse of [`split_chunks`] modulo tail padding.
pub fn dechunk(chunks: &[Chunk]) -> Vec<u32> {
    let mut ids: Vec<u32> = chunks.iter().flat_map(|c| c.tokens.iter().copied()).collect();
    while ids.last() == Some(&vocab::PAD) {
        ids.pop();
    }
    ids
}

/// Seeded document-level holdout split.
///
/// Returns (train, validation) document indices, each sorted ascending.
/// The number of validation documents is `floor(doc_count * fraction)`;
/// a fraction that selects zero documents is an error.
pub fn holdout_split(
    doc_count: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let n_val = (doc_count as f64 * fraction).floor() as usize;
    if n_val == 0 {
        return Err(CorpusError::EmptyValidation {
            fraction,
            docs: doc_count,
        });
    }
    let mut order: Vec<usize> = (0..doc_count).collect();
    Rng::for_stream(seed, "holdout").shuffle(&mut order);
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Fixed-length training windows cut from a document, tail right-padded.
///
/// Both the trainer and neighbor precomputation iterate windows through this
/// single function so their chunk indexing always agrees.
pub fn windows(ids: &[u32], n: usize) -> Vec<Vec<u32>> {
    assert!(n >= 1);
    ids.chunks(n)
        .map(|piece| {
            let mut w = piece.to_vec();
            w.resize(n, vocab::PAD);
            w
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(n: usize) -> TokenSequence {
        TokenSequence {
            doc_id: 7,
            ids: (0..n as u32).map(|i| i % 97 + 300).collect(),
            provenance: Provenance::Train,
        }
    }

    #[test]
    fn chunk_counts_match_ceiling() {
        assert_eq!(split_chunks(&seq(4096), 64).len(), 64);
        assert_eq!(split_chunks(&seq(64), 64).len(), 1);
        assert_eq!(split_chunks(&seq(100), 64).len(), 2);
    }

    #[test]
    fn exact_multiple_has_no_padding() {
        let chunks = split_chunks(&seq(64), 64);
        assert!(chunks[0].tokens.iter().all(|&t| t != vocab::PAD));
    }

    #[test]
    fn tail_chunk_padding_count() {
        let chunks = split_chunks(&seq(100), 64);
        let pads = chunks[1].tokens.iter().filter(|&&t| t == vocab::PAD).count();
        assert_eq!(pads, 28);
    }

    #[test]
    fn dechunk_inverts_chunking() {
        let s = seq(100);
        assert_eq!(dechunk(&split_chunks(&s, 64)), s.ids);
    }

    #[test]
    fn ordinals_are_dense() {
        let chunks = split_chunks(&seq(1000), 64);
        for (i, c) in chunks.iter().enumerate() {
            assert_eq!(c.ordinal as usize, i);
        }
    }

    #[test]
    fn empty_sequence_gives_no_chunks() {
        assert!(split_chunks(&seq(0), 64).is_empty());
    }

    #[test]
    fn holdout_one_percent_of_200_is_2() {
        let (train, val) = holdout_split(200, 0.01, 9).unwrap();
        assert_eq!(val.len(), 2);
        assert_eq!(train.len(), 198);
    }

    #[test]
    fn holdout_partitions_documents() {
        let (train, val) = holdout_split(50, 0.1, 3).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(train.iter().all(|d| !val.contains(d)));
    }

    #[test]
    fn holdout_is_seed_deterministic() {
        assert_eq!(
            holdout_split(123, 0.05, 42).unwrap(),
            holdout_split(123, 0.05, 42).unwrap()
        );
        assert_ne!(
            holdout_split(123, 0.05, 42).unwrap().1,
            holdout_split(123, 0.05, 43).unwrap().1
        );
    }

    #[test]
    fn holdout_selecting_zero_documents_is_an_error() {
        assert!(matches!(
            holdout_split(50, 0.01, 1),
            Err(CorpusError::EmptyValidation { .. })
        ));
        assert!(matches!(
            holdout_split(50, 0.0, 1),
            Err(CorpusError::BadFraction(_))
        ));
    }

    #[test]
    fn windows_cover_and_pad() {
        let ids: Vec<u32> = (300..1000).collect();
        let ws = windows(&ids, 256);
        assert_eq!(ws.len(), 3);
        assert!(ws.iter().all(|w| w.len() == 256));
        let flat: Vec<u32> = ws.iter().flatten().copied().filter(|&t| t != vocab::PAD).collect();
        assert_eq!(flat, ids);
    }

    proptest! {
        #[test]
        fn chunking_partitions_any_document(len in 0usize..500, m in 1usize..80) {
            let s = seq(len);
            let chunks = split_chunks(&s, m);
            prop_assert_eq!(chunks.len(), len.div_ceil(m));
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.ordinal as usize, i);
                prop_assert_eq!(c.tokens.len(), m);
            }
            prop_assert_eq!(dechunk(&chunks), s.ids);
        }

        #[test]
        fn holdout_counts_and_disjointness(docs in 2usize..300, pct in 1u32..99) {
            let fraction = f64::from(pct) / 100.0;
            match holdout_split(docs, fraction, 11) {
                Ok((train, val)) => {
                    prop_assert_eq!(val.len(), (docs as f64 * fraction).floor() as usize);
                    prop_assert_eq!(train.len() + val.len(), docs);
                }
                Err(CorpusError::EmptyValidation { .. }) => {
                    prop_assert_eq!((docs as f64 * fraction).floor() as usize, 0);
                }
                Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
            }
        }
    }
}
