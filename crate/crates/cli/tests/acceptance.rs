//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its own wall time.
//!
//! Tests share a process-wide lock so timings stay meaningful on one core;
//! criteria 5 and 6 additionally share a lazily built training fixture
//! (corpus, index, neighbors, base checkpoint, both continued runs).
//!
//! Run with: cargo test -p minretro-cli --test acceptance -- --nocapture

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use minretro::check::{fd_directional, grad_dot_direction, random_direction, relative_error};
use minretro::corpus::{holdout_split, vocab, Provenance, TokenDataset, TokenSequence, Vocabulary};
use minretro::evalgen::{
    evaluate, perplexity, qa_metrics, rouge_geo, rouge_scores, truncate_generation, EvalConfig,
    PromptTemplate,
};
use minretro::model::{lm_loss, shift_targets, NeighborBatch, RetroConfig, RetroModel};
use minretro::numerics::Tape;
use minretro::retrieval::{
    brute_force_query, precompute_neighbors, AnnIndex, ChunkDatabase, IndexParams, NeighborFile,
    QueryOpts,
};
use minretro::rng::Rng;
use minretro::synth;
use minretro::training::{
    build_loss_mask, gpt_fit, instruction_tune, pretrain_gpt, retrofit, Schedule, SftHyperparams,
    TrainPlan,
};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|e| e.into_inner())
}

fn pass(criterion: u32, what: &str, t0: Instant) {
    println!(
        "PASS criterion {criterion}: {what} ({:.1}s)",
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Shared small helpers

fn rand_tokens(n: usize, vocab_size: usize, rng: &mut Rng) -> Vec<u32> {
    (0..n).map(|_| (6 + rng.below(vocab_size - 6)) as u32).collect()
}

fn rand_neighbors(cfg: &RetroConfig, l: usize, rng: &mut Rng) -> NeighborBatch {
    NeighborBatch {
        k: cfg.k_neighbors,
        m: cfg.chunk_size,
        chunks: (0..(l - 1) * cfg.k_neighbors)
            .map(|_| rand_tokens(cfg.chunk_size, cfg.vocab_size, rng))
            .collect(),
    }
}

fn logits_of(
    model: &RetroModel<f64>,
    tokens: &[u32],
    nb: Option<&NeighborBatch>,
    gate: u8,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let leased = model.lease(&mut tape);
    let id = model
        .retro_forward(&mut tape, &leased, tokens, nb, gate)
        .expect("forward");
    tape.value(id).data().to_vec()
}

fn warm_cca(model: &mut RetroModel<f64>, seed: u64) {
    let mut rng = Rng::new(seed);
    for &l in &model.config.cca_layers.clone() {
        for suffix in ["wo", "bo"] {
            let name = format!("cca.layer{l}.{suffix}");
            for v in model.params.get_mut(&name).data_mut() {
                *v = rng.normal() * 0.05;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: gate-off equivalence over 20 random initializations.

#[test]
fn criterion_01_gate_off_equivalence() {
    let _g = serial();
    let t0 = Instant::now();
    let retro_cfg = RetroConfig {
        vocab_size: 500,
        d_model: 64,
        n_layers: 3,
        n_heads: 4,
        max_seq: 128,
        chunk_size: 32,
        k_neighbors: 2,
        encoder_layers: 2,
        cca_layers: vec![2],
        gate: 1,
        ff_mult: 4,
    };
    let gpt_cfg = RetroConfig {
        cca_layers: vec![],
        gate: 0,
        ..retro_cfg.clone()
    };
    for seed in 0..20u64 {
        let retro = RetroModel::<f64>::init(retro_cfg.clone(), seed).unwrap();
        let mut gpt = RetroModel::<f64>::init(gpt_cfg.clone(), seed + 1000).unwrap();
        for slot in 0..gpt.params.len() {
            let name = gpt.params.name(slot).to_string();
            *gpt.params.at_mut(slot) = retro.params.get(&name).clone();
        }
        let mut rng = Rng::new(seed * 7 + 3);
        let tokens = rand_tokens(128, 500, &mut rng);
        let a = logits_of(&retro, &tokens, None, 0);
        let b = logits_of(&gpt, &tokens, None, 0);
        let max_abs = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert_eq!(max_abs, 0.0, "seed {seed}: max |diff| {max_abs}");
    }
    pass(1, "gate-off forward equals the GPT backbone exactly on 20 inits", t0);
}

// ---------------------------------------------------------------------------
// Criterion 2: chunk-causality under 100 bitwise perturbation trials.

#[test]
fn criterion_02_chunk_causality() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = RetroConfig {
        vocab_size: 500,
        d_model: 64,
        n_layers: 3,
        n_heads: 4,
        max_seq: 256,
        chunk_size: 64,
        k_neighbors: 2,
        encoder_layers: 2,
        cca_layers: vec![2],
        gate: 1,
        ff_mult: 4,
    };
    let mut model = RetroModel::<f64>::init(cfg.clone(), 5).unwrap();
    warm_cca(&mut model, 17);
    let l = cfg.max_seq / cfg.chunk_size;
    let v = cfg.vocab_size;
    let per_chunk = cfg.chunk_size * v;
    let mut rng = Rng::new(99);
    for trial in 0..100 {
        let tokens = rand_tokens(cfg.max_seq, v, &mut rng);
        let nb = rand_neighbors(&cfg, l, &mut rng);
        let base = logits_of(&model, &tokens, Some(&nb), 1);
        if trial % 2 == 0 {
            // (a) Future-token perturbation: rows before position p are
            // bitwise unchanged.
            let p = cfg.chunk_size + rng.below(cfg.max_seq - cfg.chunk_size);
            let mut tk = tokens.clone();
            tk[p] = (6 + rng.below(v - 6)) as u32;
            let got = logits_of(&model, &tk, Some(&nb), 1);
            assert_eq!(
                &base[..p * v],
                &got[..p * v],
                "trial {trial}: future token at {p} leaked backward"
            );
        } else {
            // (b) Neighbor sets at index >= i are invisible to chunk i:
            // perturbing set s only touches chunks > s.
            let s = rng.below(l - 1);
            let mut nb2 = nb.clone();
            let c = rng.below(cfg.k_neighbors);
            let t = rng.below(cfg.chunk_size);
            nb2.chunks[s * cfg.k_neighbors + c][t] = (6 + rng.below(v - 6)) as u32;
            let got = logits_of(&model, &tokens, Some(&nb2), 1);
            assert_eq!(
                &base[..(s + 1) * per_chunk],
                &got[..(s + 1) * per_chunk],
                "trial {trial}: neighbor set {s} leaked into earlier chunks"
            );
        }
    }
    pass(2, "100 perturbation trials leave earlier logits bitwise unchanged", t0);
}

// ---------------------------------------------------------------------------
// Criterion 3: finite-difference gradient check on the full loss at the
// stated shape (2 layers, d=64, n=256, m=64, k=2), 20 directions.

#[test]
fn criterion_03_gradient_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = RetroConfig {
        vocab_size: 256,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        max_seq: 256,
        chunk_size: 64,
        k_neighbors: 2,
        encoder_layers: 2,
        cca_layers: vec![1],
        gate: 1,
        ff_mult: 4,
    };
    let mut model = RetroModel::<f64>::init(cfg.clone(), 3).unwrap();
    warm_cca(&mut model, 7);
    let mut rng = Rng::new(23);
    let tokens = rand_tokens(256, cfg.vocab_size, &mut rng);
    let nb = rand_neighbors(&cfg, 4, &mut rng);
    let (targets, mask) = shift_targets(&tokens);

    let loss_of = |m: &RetroModel<f64>| -> f64 {
        let mut tape = Tape::new();
        let leased = m.lease(&mut tape);
        let logits = m
            .retro_forward(&mut tape, &leased, &tokens, Some(&nb), 1)
            .unwrap();
        let loss = lm_loss(&mut tape, logits, &targets, &mask).unwrap();
        tape.value(loss).item()
    };
    let grads = {
        let mut tape = Tape::new();
        let leased = model.lease(&mut tape);
        let logits = model
            .retro_forward(&mut tape, &leased, &tokens, Some(&nb), 1)
            .unwrap();
        let loss = lm_loss(&mut tape, logits, &targets, &mask).unwrap();
        tape.backward(loss);
        leased
            .ids()
            .iter()
            .map(|&id| tape.grad_or_zeros(id))
            .collect::<Vec<_>>()
    };
    let mut dir_rng = Rng::new(41);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let dir = random_direction(&model.params, &mut dir_rng);
        let analytic = grad_dot_direction(&grads, &dir);
        let numeric = fd_directional(&model.params, &dir, 1e-4, |p| {
            loss_of(&RetroModel {
                config: model.config.clone(),
                params: p.clone(),
            })
        });
        let rel = relative_error(analytic, numeric);
        worst = worst.max(rel);
        assert!(
            rel < 1e-5,
            "direction {trial}: rel err {rel} (analytic {analytic}, fd {numeric})"
        );
    }
    pass(
        3,
        &format!("20 finite-difference directions, worst rel err {worst:.2e} < 1e-5"),
        t0,
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: index exactness and recall sweep on 10 000 chunks.

#[test]
fn criterion_04_index_exactness_and_recall() {
    let _g = serial();
    let t0 = Instant::now();
    // Exactly 10 000 chunks of duplicate-rich text.
    let corpus = synth::generate(&synth::SynthSpec {
        n_passages: 1000,
        ..synth::SynthSpec::default()
    });
    let vocab = Vocabulary::build(corpus.documents.iter().map(String::as_str), 1, 100_000);
    let mut docs: Vec<TokenSequence> = Vec::new();
    let mut chunks = 0usize;
    for (i, text) in corpus.documents.iter().enumerate() {
        if chunks >= 10_000 {
            break;
        }
        let mut ids = vocab.tokenize(text);
        let doc_chunks = ids.len().div_ceil(64).min(10_000 - chunks);
        ids.truncate(doc_chunks * 64);
        chunks += doc_chunks;
        docs.push(TokenSequence {
            doc_id: i as u32,
            ids,
            provenance: Provenance::Train,
        });
    }
    let ds = TokenDataset::new(vocab.size() as u32, 64, docs).unwrap();
    let db = ChunkDatabase::build(&ds, 128, 5).unwrap();
    assert_eq!(db.len(), 10_000);
    let mut rng = Rng::new(31);

    // Cell count follows the usual IVF sizing for 10k points (~4 sqrt N).
    let params = IndexParams {
        ncentroids: 512,
        ef_construction: 100,
        seed: 7,
        ..IndexParams::default()
    };
    let mut index = AnnIndex::train(db.embeddings(), db.len(), 128, &params).unwrap();
    index.add(&db).unwrap();

    // Exactness limit: exhaustive probing plus exact re-ranking reproduces
    // the brute-force oracle id-for-id.
    let exhaustive = QueryOpts {
        nprobe: index.ncentroids(),
        ef_search: 64,
        exact_rerank: true,
    };
    for probe in 0..50u32 {
        let q = db.embedding(probe * 199);
        let got: Vec<u32> = index
            .query(q, 10, &exhaustive, Some(&db))
            .unwrap()
            .hits
            .iter()
            .map(|h| h.id)
            .collect();
        let want: Vec<u32> = brute_force_query(&db, q, 10).iter().map(|h| h.id).collect();
        assert_eq!(got, want, "query {probe} differs from the oracle");
    }

    // Recall sweep: perturbed database chunks as queries, fixed beam.
    let mut queries = Vec::new();
    for i in 0..100u32 {
        let mut tokens = db.chunk(i * 97).tokens.clone();
        for _ in 0..6 {
            let p = rng.below(tokens.len());
            tokens[p] = (6 + rng.below(vocab.size() - 6)) as u32;
        }
        queries.push(db.embed_query(&tokens));
    }
    let mut last_recall = 0.0f64;
    let mut recalls = Vec::new();
    for &nprobe in &[1usize, 4, 16, 64, 256] {
        let opts = QueryOpts {
            nprobe,
            ef_search: 256,
            exact_rerank: true,
        };
        let mut hits = 0usize;
        for q in &queries {
            let got = index.query(q, 10, &opts, Some(&db)).unwrap();
            let got_ids: std::collections::HashSet<u32> =
                got.hits.iter().map(|h| h.id).collect();
            let want = brute_force_query(&db, q, 10);
            hits += want.iter().filter(|h| got_ids.contains(&h.id)).count();
        }
        let recall = hits as f64 / (10 * queries.len()) as f64;
        assert!(
            recall >= last_recall,
            "recall fell from {last_recall} to {recall} at nprobe {nprobe}"
        );
        last_recall = recall;
        recalls.push((nprobe, recall));
    }
    assert!(
        last_recall >= 0.95,
        "recall@10 at nprobe=256 is {last_recall}, need >= 0.95"
    );
    pass(
        4,
        &format!(
            "exhaustive+rerank equals brute force; recall@10 sweep {:?}",
            recalls
        ),
        t0,
    );
}

// ---------------------------------------------------------------------------
// Shared training fixture for criteria 5 and 6: the duplicate-rich corpus
// at d=128 / 4 layers, with base, GPT-fit and unfrozen retro-fit runs.

struct Fixture {
    /// Keeps the checkpoint files alive for the suite's lifetime.
    _dir: tempfile::TempDir,
    train: TokenDataset,
    val: TokenDataset,
    db: ChunkDatabase,
    nf_train: NeighborFile,
    nf_val: NeighborFile,
    retro_cfg: RetroConfig,
    base_ckpt: PathBuf,
    base_decoder_fp: u64,
    fit_plan: TrainPlan,
    gptfit_ppl: f64,
    retrofit_ppl: f64,
}

fn fit_steps() -> u64 {
    180
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(build_fixture)
}

fn build_fixture() -> Fixture {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = synth::SynthSpec::default();
    let corpus = synth::generate(&spec);
    let vocab = Vocabulary::build(corpus.documents.iter().map(String::as_str), 1, 100_000);
    let (train_idx, val_idx) = holdout_split(corpus.documents.len(), 0.01, 7).unwrap();
    let tokenize = |idx: &[usize], prov| -> Vec<TokenSequence> {
        idx.iter()
            .map(|&i| {
                let mut ids = vocab.tokenize(&corpus.documents[i]);
                ids.push(vocab::EOD);
                TokenSequence {
                    doc_id: i as u32,
                    ids,
                    provenance: prov,
                }
            })
            .collect()
    };
    let train = TokenDataset::new(vocab.size() as u32, 64, tokenize(&train_idx, Provenance::Train)).unwrap();
    let val = TokenDataset::new(vocab.size() as u32, 64, tokenize(&val_idx, Provenance::Heldout)).unwrap();
    println!(
        "[fixture] corpus: {} train tokens, {} val tokens, vocab {} ({:.0?})",
        train.total_tokens(),
        val.total_tokens(),
        vocab.size(),
        t0.elapsed()
    );

    let db = ChunkDatabase::build(&train, 128, 7).unwrap();
    let params = IndexParams {
        ncentroids: 1024.min(db.len()),
        seed: 7,
        ..IndexParams::default()
    };
    let mut index = AnnIndex::train(db.embeddings(), db.len(), 128, &params).unwrap();
    index.add(&db).unwrap();
    let opts = QueryOpts {
        nprobe: 64,
        ef_search: 64,
        exact_rerank: true,
    };
    let nf_train = precompute_neighbors(&db, &index, &train, 256, 2, &opts).unwrap();
    let nf_val = precompute_neighbors(&db, &index, &val, 256, 2, &opts).unwrap();
    println!(
        "[fixture] db {} chunks, neighbors done ({:.0?})",
        db.len(),
        t0.elapsed()
    );

    let gpt_cfg = RetroConfig {
        vocab_size: vocab.size(),
        d_model: 128,
        n_layers: 4,
        n_heads: 4,
        max_seq: 256,
        chunk_size: 64,
        k_neighbors: 2,
        encoder_layers: 2,
        cca_layers: vec![],
        gate: 0,
        ff_mult: 4,
    };
    let retro_cfg = RetroConfig {
        cca_layers: RetroConfig::default_cca_layers(4),
        gate: 1,
        ..gpt_cfg.clone()
    };

    let mut base = RetroModel::<f32>::init(gpt_cfg.clone(), 11).unwrap();
    let base_plan = TrainPlan::pretraining(
        300,
        8,
        Schedule {
            peak_lr: 1e-3,
            min_lr: 1e-4,
            warmup_samples: 160,
            decay_samples: 8000,
        },
        13,
    );
    pretrain_gpt(&mut base, &train, &base_plan, None).unwrap();
    let base_ckpt = dir.path().join("base.ckpt");
    base.save(&base_ckpt).unwrap();
    let base_ppl = perplexity(&base, &val, None, 0, None).unwrap();
    println!("[fixture] base ppl {base_ppl:.3} ({:.0?})", t0.elapsed());

    // Equal added-token budgets for both continued runs.
    let fit_plan = TrainPlan::pretraining(
        fit_steps(),
        8,
        Schedule {
            peak_lr: 7e-4,
            min_lr: 1e-4,
            warmup_samples: 80,
            decay_samples: 2400,
        },
        17,
    );
    let mut gptfit = base.clone();
    gpt_fit(&mut gptfit, &train, &fit_plan, None).unwrap();
    let gptfit_ppl = perplexity(&gptfit, &val, None, 0, None).unwrap();
    println!("[fixture] gpt-fit ppl {gptfit_ppl:.3} ({:.0?})", t0.elapsed());

    let mut retro = RetroModel::<f32>::init(retro_cfg.clone(), 19).unwrap();
    retro.load_backbone(&base_ckpt).unwrap();
    retrofit(&mut retro, &train, &db, &nf_train, true, &fit_plan, None).unwrap();
    let retrofit_ppl = perplexity(&retro, &val, Some((&db, &nf_val)), 1, None).unwrap();
    println!(
        "[fixture] retro-fit ppl {retrofit_ppl:.3} ({:.0?} total)",
        t0.elapsed()
    );
    let retro_ckpt = dir.path().join("retro.ckpt");
    retro.save(&retro_ckpt).unwrap();

    Fixture {
        _dir: dir,
        train,
        val,
        db,
        nf_train,
        nf_val,
        retro_cfg,
        base_ckpt,
        base_decoder_fp: base.params.fingerprint("dec."),
        fit_plan,
        gptfit_ppl,
        retrofit_ppl,
    }
}

// Criterion 5: retro-fit beats GPT-fit by at least 5% validation
// perplexity after equal added-token budgets.
#[test]
fn criterion_05_retrofit_ordering() {
    let _g = serial();
    let t0 = Instant::now();
    let fix = fixture();
    let ratio = fix.retrofit_ppl / fix.gptfit_ppl;
    assert!(
        ratio <= 0.95,
        "retro-fit ppl {:.3} vs gpt-fit ppl {:.3} (ratio {ratio:.3}) must be <= 0.95",
        fix.retrofit_ppl,
        fix.gptfit_ppl
    );
    pass(
        5,
        &format!(
            "retro-fit ppl {:.2} <= 0.95 x gpt-fit ppl {:.2} (ratio {:.3})",
            fix.retrofit_ppl, fix.gptfit_ppl, ratio
        ),
        t0,
    );
}

// Criterion 6: unfreezing the decoder beats freezing it under identical
// schedules, and the frozen run's decoder stays bitwise unchanged.
#[test]
fn criterion_06_freeze_vs_unfreeze() {
    let _g = serial();
    let t0 = Instant::now();
    let fix = fixture();
    let mut frozen = RetroModel::<f32>::init(fix.retro_cfg.clone(), 19).unwrap();
    frozen.load_backbone(&fix.base_ckpt).unwrap();
    retrofit(
        &mut frozen,
        &fix.train,
        &fix.db,
        &fix.nf_train,
        false,
        &fix.fit_plan,
        None,
    )
    .unwrap();
    let frozen_ppl = perplexity(&frozen, &fix.val, Some((&fix.db, &fix.nf_val)), 1, None).unwrap();
    assert_eq!(
        frozen.params.fingerprint("dec."),
        fix.base_decoder_fp,
        "frozen retro-fit must leave decoder parameters bitwise unchanged"
    );
    assert!(
        fix.retrofit_ppl < frozen_ppl,
        "unfrozen ppl {:.3} must be strictly below frozen ppl {frozen_ppl:.3}",
        fix.retrofit_ppl
    );
    pass(
        6,
        &format!(
            "unfrozen ppl {:.2} < frozen ppl {:.2}; frozen decoder bitwise stable",
            fix.retrofit_ppl, frozen_ppl
        ),
        t0,
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: retro-fit step-0 identity (its own small setup keeps this
// check inside its one-minute budget).

#[test]
fn criterion_07_retrofit_step0_identity() {
    let _g = serial();
    let t0 = Instant::now();
    let spec = synth::SynthSpec::small(3);
    let corpus = synth::generate(&spec);
    let vocab = Vocabulary::build(corpus.documents.iter().map(String::as_str), 1, 100_000);
    let (train_idx, val_idx) = holdout_split(corpus.documents.len(), 0.05, 3).unwrap();
    let tokenize = |idx: &[usize], prov| -> Vec<TokenSequence> {
        idx.iter()
            .map(|&i| {
                let mut ids = vocab.tokenize(&corpus.documents[i]);
                ids.push(vocab::EOD);
                TokenSequence {
                    doc_id: i as u32,
                    ids,
                    provenance: prov,
                }
            })
            .collect()
    };
    let train = TokenDataset::new(vocab.size() as u32, 64, tokenize(&train_idx, Provenance::Train)).unwrap();
    let val = TokenDataset::new(vocab.size() as u32, 64, tokenize(&val_idx, Provenance::Heldout)).unwrap();

    let gpt_cfg = RetroConfig {
        vocab_size: vocab.size(),
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        max_seq: 256,
        chunk_size: 64,
        k_neighbors: 2,
        encoder_layers: 2,
        cca_layers: vec![],
        gate: 0,
        ff_mult: 4,
    };
    // A brief 64-bit pretrain so the identity is checked at a non-trivial
    // point in weight space.
    let mut base = RetroModel::<f64>::init(gpt_cfg.clone(), 5).unwrap();
    let plan = TrainPlan::pretraining(20, 4, Schedule::constant(5e-4), 9);
    pretrain_gpt(&mut base, &train, &plan, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("gpt.ckpt");
    base.save(&ckpt).unwrap();

    // Neighbors for the validation pass come straight from the database.
    let db = ChunkDatabase::build(&train, 64, 5).unwrap();
    let params = IndexParams {
        ncentroids: 64,
        seed: 3,
        ..IndexParams::default()
    };
    let mut index = AnnIndex::train(db.embeddings(), db.len(), 64, &params).unwrap();
    index.add(&db).unwrap();
    let opts = QueryOpts {
        nprobe: 16,
        ef_search: 32,
        exact_rerank: true,
    };
    let nf_val = precompute_neighbors(&db, &index, &val, 256, 2, &opts).unwrap();

    let retro_cfg = RetroConfig {
        cca_layers: vec![1],
        gate: 1,
        ..gpt_cfg
    };
    let mut retro = RetroModel::<f64>::init(retro_cfg, 77).unwrap();
    retro.load_backbone(&ckpt).unwrap();

    let base_loss = perplexity(&base, &val, None, 0, None).unwrap().ln();
    let retro_loss = perplexity(&retro, &val, Some((&db, &nf_val)), 1, None)
        .unwrap()
        .ln();
    let diff = (base_loss - retro_loss).abs();
    assert!(
        diff < 1e-6,
        "step-0 validation loss differs: gpt {base_loss} vs retro {retro_loss} (|diff| {diff})"
    );
    pass(
        7,
        &format!("fresh retro-fit loss equals the GPT checkpoint loss (|diff| {diff:.2e})"),
        t0,
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: instruction-tuning contract.

#[test]
fn criterion_08_sft_contract() {
    let _g = serial();
    let t0 = Instant::now();
    // Self-contained setup: small duplicate-rich corpus, short pretrain +
    // retro-fit, then the tuning run under test.
    let spec = synth::SynthSpec {
        n_passages: 400,
        payload_len: 4,
        ..synth::SynthSpec::small(21)
    };
    let corpus = synth::generate(&spec);
    let vocab = Vocabulary::build(corpus.documents.iter().map(String::as_str), 1, 100_000);
    let (train_idx, val_idx) = holdout_split(corpus.documents.len(), 0.02, 3).unwrap();
    let tokenize = |idx: &[usize], prov| -> Vec<TokenSequence> {
        idx.iter()
            .map(|&i| {
                let mut ids = vocab.tokenize(&corpus.documents[i]);
                ids.push(vocab::EOD);
                TokenSequence {
                    doc_id: i as u32,
                    ids,
                    provenance: prov,
                }
            })
            .collect()
    };
    let train = TokenDataset::new(vocab.size() as u32, 64, tokenize(&train_idx, Provenance::Train)).unwrap();
    let _val = TokenDataset::new(vocab.size() as u32, 64, tokenize(&val_idx, Provenance::Heldout)).unwrap();

    let db = ChunkDatabase::build(&train, 128, 7).unwrap();
    let params = IndexParams {
        ncentroids: 256.min(db.len()),
        seed: 9,
        ..IndexParams::default()
    };
    let mut index = AnnIndex::train(db.embeddings(), db.len(), 128, &params).unwrap();
    index.add(&db).unwrap();
    let opts = QueryOpts {
        nprobe: 32,
        ef_search: 64,
        exact_rerank: true,
    };
    let nf = precompute_neighbors(&db, &index, &train, 256, 2, &opts).unwrap();

    let gpt_cfg = RetroConfig {
        vocab_size: vocab.size(),
        d_model: 128,
        n_layers: 4,
        n_heads: 4,
        max_seq: 256,
        chunk_size: 64,
        k_neighbors: 2,
        encoder_layers: 2,
        cca_layers: vec![],
        gate: 0,
        ff_mult: 4,
    };
    let mut base = RetroModel::<f32>::init(gpt_cfg.clone(), 31).unwrap();
    let plan = TrainPlan::pretraining(
        150,
        8,
        Schedule {
            peak_lr: 1e-3,
            min_lr: 2e-4,
            warmup_samples: 80,
            decay_samples: 4000,
        },
        33,
    );
    pretrain_gpt(&mut base, &train, &plan, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("base.ckpt");
    base.save(&ckpt).unwrap();

    let retro_cfg = RetroConfig {
        cca_layers: RetroConfig::default_cca_layers(4),
        gate: 1,
        ..gpt_cfg
    };
    let mut retro = RetroModel::<f32>::init(retro_cfg, 37).unwrap();
    retro.load_backbone(&ckpt).unwrap();
    let rf_plan = TrainPlan {
        steps: 80,
        ..plan.clone()
    };
    retrofit(&mut retro, &train, &db, &nf, true, &rf_plan, None).unwrap();

    // QA sets: tuning facts and a held-out eval slice.
    let mut order: Vec<usize> = (0..corpus.facts.len()).collect();
    Rng::for_stream(5, "fact-split").shuffle(&mut order);
    let eval_facts: Vec<synth::Fact> = order[..40].iter().map(|&i| corpus.facts[i].clone()).collect();
    let sft_facts: Vec<synth::Fact> =
        order[40..360].iter().map(|&i| corpus.facts[i].clone()).collect();
    let examples = synth::qa_eval_set(&eval_facts);
    let template = PromptTemplate::default();
    let samples = synth::build_sft_conversations(
        &sft_facts, &db, &index, &vocab, &template, 2, &opts,
    )
    .unwrap();

    let eval_cfg = EvalConfig {
        prompt_k: 5,
        encoder_gate: 0,
        max_new: 16,
        max_prompt_tokens: 232,
        nprobe: 32,
        ef_search: 64,
    };
    let pre = evaluate(&retro, &vocab, &examples, Some((&db, &index)), &template, &eval_cfg).unwrap();
    let pre_em = pre.mean(minretro::evalgen::TaskType::ShortQa).unwrap();

    // Loss invariance to labels outside the mask, exact.
    {
        let (tokens, label_mask) = build_loss_mask(&samples[0], &vocab).unwrap();
        let t = tokens.len();
        let mut targets = vec![0u32; t];
        let mut mask = vec![false; t];
        for i in 0..t - 1 {
            targets[i] = tokens[i + 1];
            mask[i] = label_mask[i + 1];
        }
        let mut tape = Tape::new();
        let leased = retro.lease(&mut tape);
        let logits = retro.retro_forward(&mut tape, &leased, &tokens, None, 0).unwrap();
        let a = lm_loss(&mut tape, logits, &targets, &mask).unwrap();
        let mut flipped = targets.clone();
        let off = mask.iter().position(|&m| !m).unwrap();
        flipped[off] = 9;
        let b = lm_loss(&mut tape, logits, &flipped, &mask).unwrap();
        assert_eq!(
            tape.value(a).item(),
            tape.value(b).item(),
            "loss must be exactly invariant to labels outside the mask"
        );
    }

    // 200-step tuning with the gate off; the full-scale recipe stays the
    // recorded default, the step count and learning rate are scaled to the
    // desk model.
    let enc_fp = retro.params.fingerprint("enc.");
    let cca_fp = retro.params.fingerprint("cca.");
    let hp = SftHyperparams {
        batch_size: 16,
        lr: 7e-4,
        steps: 200,
        seed: 41,
        ..SftHyperparams::default()
    };
    let out = instruction_tune(&mut retro, &samples, &vocab, &hp).unwrap();
    assert_eq!(retro.params.fingerprint("enc."), enc_fp, "encoder changed");
    assert_eq!(retro.params.fingerprint("cca."), cca_fp, "cross-attention changed");

    let post = evaluate(&retro, &vocab, &examples, Some((&db, &index)), &template, &eval_cfg).unwrap();
    let post_em = post.mean(minretro::evalgen::TaskType::ShortQa).unwrap();
    assert!(
        post_em - pre_em >= 0.20,
        "EM must improve by >= 20 points: pre {pre_em:.3} vs post {post_em:.3} (sft loss {:.3})",
        out.outcome.final_train_loss
    );
    pass(
        8,
        &format!(
            "encoder/cca checksums stable, masked-loss invariance exact, EM {:.0}% -> {:.0}%",
            pre_em * 100.0,
            post_em * 100.0
        ),
        t0,
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: metric and truncation golden values.

#[test]
fn criterion_09_metrics_golden() {
    let _g = serial();
    let t0 = Instant::now();
    // Normalization: case and articles vanish.
    let (em, f1) = qa_metrics("The Eiffel Tower", &["eiffel tower".to_string()]);
    assert_eq!((em, f1), (1.0, 1.0));
    // Hand-counted token overlap: one shared token of two on each side.
    let (em, f1) = qa_metrics("tower bridge", &["eiffel tower".to_string()]);
    assert_eq!(em, 0.0);
    assert!((f1 - 0.5).abs() < 1e-12);
    let (em, f1) = qa_metrics("", &["paris".to_string()]);
    assert_eq!((em, f1), (0.0, 0.0));

    // Hand-counted ROUGE for "a b c d" vs "a b x d":
    //   unigrams 3/4 -> 0.75; bigrams 1/3; LCS a b d -> 0.75.
    let (r1, r2, rl) = rouge_scores("a b c d", "a b x d");
    assert!((r1 - 0.75).abs() < 1e-12);
    assert!((r2 - 1.0 / 3.0).abs() < 1e-12);
    assert!((rl - 0.75).abs() < 1e-12);
    let geo = rouge_geo("a b c d", &["a b x d".to_string()]);
    let hand = (0.75f64 * (1.0 / 3.0) * 0.75).powf(1.0 / 3.0);
    assert!((geo - hand).abs() < 1e-12);
    // The geometric mean of the hand-counted components is 0.5724.
    assert!((geo - 0.5724).abs() < 1e-3, "geo {geo}");
    assert_eq!(rouge_geo("same text", &["same text".to_string()]), 1.0);
    assert_eq!(rouge_geo("a b c", &["x y z".to_string()]), 0.0);

    // Truncation goldens.
    assert_eq!(truncate_generation("Paris |<end-of-document>| junk"), "Paris");
    assert_eq!(truncate_generation("Paris\n\nUser: next question"), "Paris");
    assert_eq!(truncate_generation("no trigger here"), "no trigger here");
    pass(9, "hand-derived metric and truncation values match exactly", t0);
}

// ---------------------------------------------------------------------------
// Criterion 10: end-to-end pipeline smoke over the real binary, with
// artifact reproducibility under a fixed seed in 64-bit mode.

fn run_cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_minretro"))
        .args(args)
        .output()
        .expect("spawn minretro");
    let code = out.status.code().unwrap_or(-1);
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (code, text)
}

fn assert_ok(args: &[&str]) -> String {
    let (code, text) = run_cli(args);
    assert_eq!(code, 0, "command {:?} failed:\n{text}", args);
    text
}

fn file_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("read {}: {e}", p.display()))
}

#[test]
fn criterion_10_pipeline_smoke() {
    let _g = serial();
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap().to_string();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        "seed = 7\n\
         precision = f64\n\
         corpus.synthetic = true\n\
         synth.passages = 150\n\
         synth.passages_per_doc = 4\n\
         synth.payload_words = 160\n\
         synth.entity_first = 60\n\
         synth.entity_second = 60\n\
         synth.eval_facts = 16\n\
         synth.sft_facts = 64\n\
         corpus.holdout_fraction = 0.03\n\
         model.d_model = 64\n\
         model.n_layers = 2\n\
         model.n_heads = 4\n\
         model.max_seq = 256\n\
         model.chunk_size = 64\n\
         index.ncentroids = 128\n\
         index.nprobe = 32\n\
         train.batch = 4\n\
         train.peak_lr = 1e-3\n\
         train.min_lr = 1e-4\n\
         train.warmup_samples = 40\n\
         train.decay_samples = 4000\n\
         train.val_interval = 0\n\
         eval.max_new = 12\n",
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();

    let corpus = format!("{root}/corpus");
    let index = format!("{root}/index");
    assert_ok(&["prepare-corpus", "--config", cfg, &format!("out={corpus}")]);
    assert_ok(&[
        "build-index",
        "--config",
        cfg,
        &format!("out={index}"),
        &format!("data.train={corpus}/train.ds"),
    ]);
    assert_ok(&[
        "precompute-neighbors",
        "--config",
        cfg,
        &format!("out={index}"),
        &format!("data.dataset={corpus}/train.ds"),
        &format!("data.db={index}/chunks.db"),
        &format!("data.index={index}/index.ann"),
        "neighbors.file=train_neighbors.bin",
    ]);
    assert_ok(&[
        "precompute-neighbors",
        "--config",
        cfg,
        &format!("out={index}"),
        &format!("data.dataset={corpus}/val.ds"),
        &format!("data.db={index}/chunks.db"),
        &format!("data.index={index}/index.ann"),
        "neighbors.file=val_neighbors.bin",
    ]);
    assert_ok(&[
        "pretrain",
        "--config",
        cfg,
        &format!("out={root}/pretrain"),
        &format!("data.train={corpus}/train.ds"),
        "train.steps=200",
    ]);
    assert_ok(&[
        "retrofit",
        "--config",
        cfg,
        &format!("out={root}/retrofit"),
        &format!("data.train={corpus}/train.ds"),
        &format!("data.ckpt={root}/pretrain/model.ckpt"),
        &format!("data.db={index}/chunks.db"),
        &format!("data.neighbors={index}/train_neighbors.bin"),
        "train.steps=100",
    ]);
    // The freeze-flag variant differs from the default run only in its
    // freeze setting (manifest diff).
    assert_ok(&[
        "retrofit",
        "--config",
        cfg,
        "--freeze-decoder",
        &format!("out={root}/retrofit-frozen"),
        &format!("data.train={corpus}/train.ds"),
        &format!("data.ckpt={root}/pretrain/model.ckpt"),
        &format!("data.db={index}/chunks.db"),
        &format!("data.neighbors={index}/train_neighbors.bin"),
        "train.steps=10",
    ]);
    {
        let a = std::fs::read_to_string(format!("{root}/retrofit/manifest-retrofit.txt")).unwrap();
        let b =
            std::fs::read_to_string(format!("{root}/retrofit-frozen/manifest-retrofit.txt")).unwrap();
        let diff: Vec<(&str, &str)> = a
            .lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| (x, y))
            .collect();
        assert!(
            diff.iter()
                .any(|(x, _)| x.starts_with("retrofit.freeze_decoder")),
            "manifests must differ in the freeze flag: {diff:?}"
        );
    }
    assert_ok(&[
        "gpt-fit",
        "--config",
        cfg,
        &format!("out={root}/gptfit"),
        &format!("data.train={corpus}/train.ds"),
        &format!("data.ckpt={root}/pretrain/model.ckpt"),
        "train.steps=60",
    ]);
    assert_ok(&[
        "sft",
        "--config",
        cfg,
        &format!("out={root}/sft"),
        &format!("data.ckpt={root}/retrofit/model.ckpt"),
        &format!("data.vocab={corpus}/vocab.txt"),
        &format!("sft.facts={corpus}/sft_facts.jsonl"),
        &format!("data.db={index}/chunks.db"),
        &format!("data.index={index}/index.ann"),
        "sft.steps=50",
        "sft.batch=8",
        "sft.lr=5e-4",
    ]);
    assert_ok(&[
        "eval",
        "--config",
        cfg,
        &format!("out={root}/eval"),
        &format!("data.ckpt={root}/sft/model.ckpt"),
        &format!("data.vocab={corpus}/vocab.txt"),
        &format!("eval.set={corpus}/eval.jsonl"),
        &format!("data.db={index}/chunks.db"),
        &format!("data.index={index}/index.ann"),
    ]);
    // Gate-off evaluation of a retro checkpoint exercises the GPT path.
    assert_ok(&[
        "eval",
        "--config",
        cfg,
        "--gate",
        "off",
        &format!("out={root}/eval-gateoff"),
        &format!("data.ckpt={root}/retrofit/model.ckpt"),
        &format!("data.vocab={corpus}/vocab.txt"),
        &format!("eval.set={corpus}/eval.jsonl"),
    ]);
    let ppl_out = assert_ok(&[
        "ppl",
        "--config",
        cfg,
        "--gate",
        "on",
        &format!("out={root}/ppl"),
        &format!("data.ckpt={root}/retrofit/model.ckpt"),
        &format!("data.dataset={corpus}/val.ds"),
        &format!("data.db={index}/chunks.db"),
        &format!("data.neighbors={index}/val_neighbors.bin"),
    ]);
    assert!(ppl_out.contains("perplexity:"));
    assert_ok(&[
        "generate",
        "--config",
        cfg,
        &format!("data.ckpt={root}/sft/model.ckpt"),
        &format!("data.vocab={corpus}/vocab.txt"),
        "gen.prompt=the access code of",
        "gen.max_new=8",
    ]);

    // Error paths: unknown command is usage (1); a missing file is a data
    // error (2).
    let (code, _) = run_cli(&["frobnicate"]);
    assert_eq!(code, 1);
    let (code, _) = run_cli(&[
        "ppl",
        "--config",
        cfg,
        &format!("out={root}/pplbad"),
        &format!("data.ckpt={root}/nope.ckpt"),
        &format!("data.dataset={corpus}/val.ds"),
    ]);
    assert_eq!(code, 2);

    // Reproducibility: re-running prepare, index, neighbors, and pretrain
    // with the same seed yields byte-identical artifacts.
    let corpus2 = format!("{root}/corpus2");
    let index2 = format!("{root}/index2");
    assert_ok(&["prepare-corpus", "--config", cfg, &format!("out={corpus2}")]);
    assert_ok(&[
        "build-index",
        "--config",
        cfg,
        &format!("out={index2}"),
        &format!("data.train={corpus2}/train.ds"),
    ]);
    assert_ok(&[
        "precompute-neighbors",
        "--config",
        cfg,
        &format!("out={index2}"),
        &format!("data.dataset={corpus2}/train.ds"),
        &format!("data.db={index2}/chunks.db"),
        &format!("data.index={index2}/index.ann"),
        "neighbors.file=train_neighbors.bin",
    ]);
    assert_ok(&[
        "pretrain",
        "--config",
        cfg,
        &format!("out={root}/pretrain2"),
        &format!("data.train={corpus2}/train.ds"),
        "train.steps=200",
    ]);
    for (a, b) in [
        (format!("{corpus}/train.ds"), format!("{corpus2}/train.ds")),
        (format!("{corpus}/vocab.txt"), format!("{corpus2}/vocab.txt")),
        (format!("{index}/chunks.db"), format!("{index2}/chunks.db")),
        (format!("{index}/index.ann"), format!("{index2}/index.ann")),
        (
            format!("{index}/train_neighbors.bin"),
            format!("{index2}/train_neighbors.bin"),
        ),
        (
            format!("{root}/pretrain/model.ckpt"),
            format!("{root}/pretrain2/model.ckpt"),
        ),
    ] {
        assert_eq!(
            file_bytes(Path::new(&a)),
            file_bytes(Path::new(&b)),
            "artifact {a} not reproducible"
        );
    }
    pass(
        10,
        "all CLI phases exit 0; seed-fixed artifacts byte-identical",
        t0,
    );
}
