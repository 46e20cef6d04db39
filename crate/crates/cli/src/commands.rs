//! Command implementations. Each command reads/writes versioned artifact
//! files and drops a manifest plus any metrics into its output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use minretro::corpus::{holdout_split, vocab, Provenance, TokenDataset, TokenSequence, Vocabulary};
use minretro::evalgen::{
    evaluate, greedy_decode, greedy_decode_with_encoder, load_eval_set, perplexity,
    save_eval_set, truncate_generation, EvalConfig, PromptTemplate,
};
use minretro::model::{RetroConfig, RetroModel};
use minretro::numerics::Scalar;
use minretro::retrieval::{
    precompute_neighbors, AnnIndex, ChunkDatabase, IndexParams, NeighborFile, QueryOpts,
};
use minretro::rng::Rng;
use minretro::synth;
use minretro::training::{
    gpt_fit, instruction_tune, load_sft_set, pretrain_gpt, retrofit, save_sft_set, Schedule,
    SftHyperparams, TrainOutcome, TrainPlan, ValSpec,
};

use crate::config::RunConfig;
use crate::CliError;

pub fn dispatch(command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    match command {
        "prepare-corpus" => prepare_corpus(cfg),
        "build-index" => build_index(cfg),
        "precompute-neighbors" => precompute_neighbors_cmd(cfg),
        "pretrain" => with_precision(cfg, PretrainCmd),
        "gpt-fit" => with_precision(cfg, GptFitCmd),
        "retrofit" => with_precision(cfg, RetrofitCmd),
        "sft" => with_precision(cfg, SftCmd),
        "eval" => with_precision(cfg, EvalCmd),
        "generate" => with_precision(cfg, GenerateCmd),
        "ppl" => with_precision(cfg, PplCmd),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

/// Commands that run under a configurable float width.
trait PrecisionCmd {
    fn run<T: Scalar>(&self, cfg: &RunConfig) -> Result<(), CliError>;
}

fn with_precision(cfg: &RunConfig, cmd: impl PrecisionCmd) -> Result<(), CliError> {
    match cfg.require("precision")? {
        "f64" => cmd.run::<f64>(cfg),
        "f32" => cmd.run::<f32>(cfg),
        other => Err(CliError::Usage(format!(
            "precision must be f32 or f64, got {other}"
        ))),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.path("out")?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_manifest(
    dir: &Path,
    phase: &str,
    cfg: &RunConfig,
    extra: &[(&str, String)],
) -> Result<(), CliError> {
    let mut text = String::from("minretro-manifest v1\n");
    let _ = writeln!(text, "phase = {phase}");
    for (k, v) in extra {
        let _ = writeln!(text, "{k} = {v}");
    }
    text.push_str("# resolved configuration\n");
    text.push_str(&cfg.dump());
    fs::write(dir.join(format!("manifest-{phase}.txt")), text)?;
    Ok(())
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    Ok(Vocabulary::load(&cfg.path("data.vocab")?).map_err(|e| CliError::Data(e.to_string()))?)
}

fn query_opts(cfg: &RunConfig, index: &AnnIndex) -> Result<QueryOpts, CliError> {
    Ok(QueryOpts {
        nprobe: cfg.usize_("index.nprobe")?.clamp(1, index.ncentroids()),
        ef_search: cfg.usize_("index.ef_search")?,
        exact_rerank: cfg.bool_("index.exact_rerank")?,
    })
}

fn train_plan(cfg: &RunConfig) -> Result<TrainPlan, CliError> {
    Ok(TrainPlan {
        steps: cfg.u64_("train.steps")?,
        batch_size: cfg.usize_("train.batch")?,
        schedule: Schedule {
            peak_lr: cfg.f64_("train.peak_lr")?,
            min_lr: cfg.f64_("train.min_lr")?,
            warmup_samples: cfg.u64_("train.warmup_samples")?,
            decay_samples: cfg.u64_("train.decay_samples")?,
        },
        beta1: cfg.f64_("train.beta1")?,
        beta2: cfg.f64_("train.beta2")?,
        weight_decay: cfg.f64_("train.weight_decay")?,
        clip_norm: cfg.f64_("train.clip_norm")?,
        seed: cfg.u64_("seed")?,
        val_interval: cfg.u64_("train.val_interval")?,
        val_windows: cfg.usize_("train.val_windows")?,
        divergence_factor: 2.0,
        divergence_patience: 100,
    })
}

fn gpt_config(cfg: &RunConfig, vocab_size: usize) -> Result<RetroConfig, CliError> {
    let config = RetroConfig {
        vocab_size,
        d_model: cfg.usize_("model.d_model")?,
        n_layers: cfg.usize_("model.n_layers")?,
        n_heads: cfg.usize_("model.n_heads")?,
        max_seq: cfg.usize_("model.max_seq")?,
        chunk_size: cfg.usize_("model.chunk_size")?,
        k_neighbors: cfg.usize_("retrieval.k")?,
        encoder_layers: cfg.usize_("model.encoder_layers")?,
        cca_layers: vec![],
        gate: 0,
        ff_mult: cfg.usize_("model.ff_mult")?,
    };
    config.validate()?;
    Ok(config)
}

fn finish_training(
    dir: &Path,
    phase: &str,
    cfg: &RunConfig,
    model_path: &Path,
    outcome: &TrainOutcome,
) -> Result<(), CliError> {
    fs::write(dir.join("metrics.csv"), &outcome.metrics_csv)?;
    let mut extra = vec![
        ("checkpoint", model_path.display().to_string()),
        ("steps", outcome.steps_run.to_string()),
        ("samples", outcome.samples_seen.to_string()),
        ("final_train_loss", format!("{:.6}", outcome.final_train_loss)),
    ];
    if let Some(ppl) = outcome.final_val_ppl {
        extra.push(("final_val_ppl", format!("{ppl:.6}")));
    }
    write_manifest(dir, phase, cfg, &extra)?;
    println!(
        "{phase}: {} steps, final train loss {:.4}{}",
        outcome.steps_run,
        outcome.final_train_loss,
        outcome
            .final_val_ppl
            .map(|p| format!(", val ppl {p:.3}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn prepare_corpus(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let seed = cfg.u64_("seed")?;
    let synthetic = cfg.get("corpus.synthetic") == Some("true");
    let mut extra: Vec<(&str, String)> = Vec::new();

    let documents: Vec<String> = if synthetic {
        let spec = synth::SynthSpec {
            n_passages: cfg.usize_("synth.passages")?,
            facts_per_passage: cfg.usize_("synth.facts_per_passage")?,
            payload_len: cfg.usize_("synth.payload_len")?,
            duplicates: cfg.usize_("synth.duplicates")?,
            passages_per_doc: cfg.usize_("synth.passages_per_doc")?,
            filler_words: cfg.usize_("synth.filler_words")?,
            payload_words: cfg.usize_("synth.payload_words")?,
            entity_first: cfg.usize_("synth.entity_first")?,
            entity_second: cfg.usize_("synth.entity_second")?,
            seed,
        };
        let corpus = synth::generate(&spec);
        fs::write(dir.join("corpus.txt"), corpus.to_text())?;

        // Hold out QA facts for evaluation, a separate slice for tuning.
        let eval_n = cfg.usize_("synth.eval_facts")?;
        let sft_n = cfg.usize_("synth.sft_facts")?;
        let mut order: Vec<usize> = (0..corpus.facts.len()).collect();
        Rng::for_stream(seed, "fact-split").shuffle(&mut order);
        let eval_facts: Vec<synth::Fact> =
            order[..eval_n].iter().map(|&i| corpus.facts[i].clone()).collect();
        let sft_facts: Vec<synth::Fact> = order[eval_n..eval_n + sft_n]
            .iter()
            .map(|&i| corpus.facts[i].clone())
            .collect();
        save_eval_set(&dir.join("eval.jsonl"), &synth::qa_eval_set(&eval_facts))
            .map_err(|e| CliError::Data(e.to_string()))?;
        synth::save_facts(&dir.join("sft_facts.jsonl"), &sft_facts)?;
        extra.push(("eval_facts", eval_n.to_string()));
        extra.push(("sft_facts", sft_n.to_string()));
        corpus.documents
    } else {
        let path = cfg.path("corpus.path")?;
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("cannot read corpus {}: {e}", path.display())))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect()
    };
    if documents.is_empty() {
        return Err(CliError::Data("corpus has no documents".into()));
    }

    let vocab = Vocabulary::build(
        documents.iter().map(String::as_str),
        cfg.usize_("corpus.min_count")?,
        cfg.usize_("corpus.max_words")?,
    );
    vocab
        .save(&dir.join("vocab.txt"))
        .map_err(|e| CliError::Data(e.to_string()))?;

    let fraction = cfg.f64_("corpus.holdout_fraction")?;
    let (train_idx, val_idx) = holdout_split(documents.len(), fraction, seed)?;
    let m = cfg.usize_("model.chunk_size")? as u32;
    let tokenize_docs = |idx: &[usize], provenance| -> Vec<TokenSequence> {
        idx.iter()
            .map(|&i| {
                let mut ids = vocab.tokenize(&documents[i]);
                ids.push(vocab::EOD);
                TokenSequence {
                    doc_id: i as u32,
                    ids,
                    provenance,
                }
            })
            .collect()
    };
    let train = TokenDataset::new(
        vocab.size() as u32,
        m,
        tokenize_docs(&train_idx, Provenance::Train),
    )?;
    let val = TokenDataset::new(
        vocab.size() as u32,
        m,
        tokenize_docs(&val_idx, Provenance::Heldout),
    )?;
    train.save(&dir.join("train.ds"))?;
    val.save(&dir.join("val.ds"))?;

    extra.push(("documents", documents.len().to_string()));
    extra.push(("train_documents", train.documents.len().to_string()));
    extra.push(("val_documents", val.documents.len().to_string()));
    extra.push(("train_tokens", train.total_tokens().to_string()));
    extra.push(("val_tokens", val.total_tokens().to_string()));
    extra.push(("vocab_size", vocab.size().to_string()));
    write_manifest(&dir, "prepare-corpus", cfg, &extra)?;
    println!(
        "prepare-corpus: {} train docs ({} tokens), {} val docs ({} tokens), vocab {}",
        train.documents.len(),
        train.total_tokens(),
        val.documents.len(),
        val.total_tokens(),
        vocab.size()
    );
    Ok(())
}

fn build_index(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let train = TokenDataset::load(&cfg.path("data.train")?)?;
    let dim = cfg.usize_("index.dim")?;
    let seed = cfg.u64_("seed")?;
    let db = ChunkDatabase::build(&train, dim, seed)?;
    db.save(&dir.join("chunks.db"))?;
    let params = IndexParams {
        ncentroids: cfg.usize_("index.ncentroids")?.min(db.len()),
        n_sub: cfg.usize_("index.n_sub")?,
        kmeans_iters: cfg.usize_("index.kmeans_iters")?,
        pq_kmeans_iters: cfg.usize_("index.pq_kmeans_iters")?,
        opq_rounds: cfg.usize_("index.opq_rounds")?,
        graph_degree: cfg.usize_("index.graph_degree")?,
        ef_construction: cfg.usize_("index.ef_construction")?,
        train_sample_cap: cfg.usize_("index.sample_cap")?,
        seed,
        default_nprobe: cfg.usize_("index.nprobe")?,
        default_ef_search: cfg.usize_("index.ef_search")?,
    };
    let mut index = AnnIndex::train(db.embeddings(), db.len(), dim, &params)?;
    index.add(&db)?;
    index.save(&dir.join("index.ann"))?;
    write_manifest(
        &dir,
        "build-index",
        cfg,
        &[
            ("chunks", db.len().to_string()),
            ("ncentroids", index.ncentroids().to_string()),
        ],
    )?;
    println!(
        "build-index: {} chunks in {} posting lists",
        db.len(),
        index.ncentroids()
    );
    Ok(())
}

fn precompute_neighbors_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let db = ChunkDatabase::load(&cfg.path("data.db")?)?;
    let index = AnnIndex::load(&cfg.path("data.index")?)?;
    let dataset = TokenDataset::load(&cfg.path("data.dataset")?)?;
    let opts = query_opts(cfg, &index)?;
    let k = cfg.usize_("retrieval.k")?;
    let n = cfg.usize_("model.max_seq")?;
    let nf = precompute_neighbors(&db, &index, &dataset, n, k, &opts)?;
    let file = cfg.get("neighbors.file").unwrap_or("neighbors.bin");
    nf.save(&dir.join(file))?;
    write_manifest(
        &dir,
        "precompute-neighbors",
        cfg,
        &[
            ("neighbor_file", file.to_string()),
            ("chunks", nf.count().to_string()),
            ("k", k.to_string()),
        ],
    )?;
    println!(
        "precompute-neighbors: {} chunks x {} neighbors -> {}",
        nf.count(),
        k,
        dir.join(file).display()
    );
    Ok(())
}

struct PretrainCmd;

impl PrecisionCmd for PretrainCmd {
    fn run<T: Scalar>(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let dir = out_dir(cfg)?;
        let train = TokenDataset::load(&cfg.path("data.train")?)?;
        let config = gpt_config(cfg, train.vocab_size as usize)?;
        let mut model = RetroModel::<T>::init(config, cfg.u64_("seed")?)?;
        let plan = train_plan(cfg)?;
        let val_ds = match cfg.get("data.val") {
            Some(p) if !p.is_empty() => Some(TokenDataset::load(Path::new(p))?),
            _ => None,
        };
        let val = val_ds.as_ref().map(|ds| ValSpec {
            dataset: ds,
            retrieval: None,
            gate: 0,
        });
        let outcome = pretrain_gpt(&mut model, &train, &plan, val.as_ref())?;
        let ckpt = dir.join("model.ckpt");
        model.save(&ckpt)?;
        finish_training(&dir, "pretrain", cfg, &ckpt, &outcome)
    }
}

struct GptFitCmd;

impl PrecisionCmd for GptFitCmd {
    fn run<T: Scalar>(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let dir = out_dir(cfg)?;
        let train = TokenDataset::load(&cfg.path("data.train")?)?;
        let mut model = RetroModel::<T>::from_checkpoint(&cfg.path("data.ckpt")?)?;
        let plan = train_plan(cfg)?;
        let val_ds = match cfg.get("data.val") {
            Some(p) if !p.is_empty() => Some(TokenDataset::load(Path::new(p))?),
            _ => None,
        };
        let val = val_ds.as_ref().map(|ds| ValSpec {
            dataset: ds,
            retrieval: None,
            gate: 0,
        });
        let outcome = gpt_fit(&mut model, &train, &plan, val.as_ref())?;
        let ckpt = dir.join("model.ckpt");
        model.save(&ckpt)?;
        finish_training(&dir, "gpt-fit", cfg, &ckpt, &outcome)
    }
}

struct RetrofitCmd;

impl PrecisionCmd for RetrofitCmd {
    fn run<T: Scalar>(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let dir = out_dir(cfg)?;
        let train = TokenDataset::load(&cfg.path("data.train")?)?;
        let db = ChunkDatabase::load(&cfg.path("data.db")?)?;
        let nf = NeighborFile::load(&cfg.path("data.neighbors")?)?;
        let gpt_ckpt = cfg.path("data.ckpt")?;

        let base = gpt_config(cfg, train.vocab_size as usize)?;
        let config = RetroConfig {
            cca_layers: cfg.cca_layers(base.n_layers)?,
            gate: 1,
            k_neighbors: nf.k as usize,
            ..base
        };
        config.validate()?;
        let mut model = RetroModel::<T>::init(config, cfg.u64_("seed")?)?;
        model.load_backbone(&gpt_ckpt)?;

        let freeze_decoder = cfg.bool_("retrofit.freeze_decoder")?;
        let plan = train_plan(cfg)?;
        let val_ds = match cfg.get("data.val") {
            Some(p) if !p.is_empty() => Some(TokenDataset::load(Path::new(p))?),
            _ => None,
        };
        let nf_val = match cfg.get("data.val_neighbors") {
            Some(p) if !p.is_empty() => Some(NeighborFile::load(Path::new(p))?),
            _ => None,
        };
        let val = match (&val_ds, &nf_val) {
            (Some(ds), Some(nv)) => Some(ValSpec {
                dataset: ds,
                retrieval: Some((&db, nv)),
                gate: 1,
            }),
            (Some(ds), None) => Some(ValSpec {
                dataset: ds,
                retrieval: None,
                gate: 0,
            }),
            _ => None,
        };
        let outcome = retrofit(&mut model, &train, &db, &nf, !freeze_decoder, &plan, val.as_ref())?;
        let ckpt = dir.join("model.ckpt");
        model.save(&ckpt)?;
        println!(
            "retrofit: decoder {}",
            if freeze_decoder { "frozen" } else { "unfrozen" }
        );
        finish_training(&dir, "retrofit", cfg, &ckpt, &outcome)
    }
}

struct SftCmd;

impl PrecisionCmd for SftCmd {
    fn run<T: Scalar>(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let dir = out_dir(cfg)?;
        let vocab = load_vocab(cfg)?;
        let mut model = RetroModel::<T>::from_checkpoint(&cfg.path("data.ckpt")?)?;
        let samples = match cfg.get("sft.samples") {
            Some(p) if !p.is_empty() => load_sft_set(Path::new(p))?,
            _ => {
                // Derive retrieval-augmented conversations from a fact file.
                let facts = synth::load_facts(&cfg.path("sft.facts")?)?;
                let db = ChunkDatabase::load(&cfg.path("data.db")?)?;
                let index = AnnIndex::load(&cfg.path("data.index")?)?;
                let opts = query_opts(cfg, &index)?;
                let convos = synth::build_sft_conversations(
                    &facts,
                    &db,
                    &index,
                    &vocab,
                    &PromptTemplate::default(),
                    cfg.usize_("sft.prompt_k")?,
                    &opts,
                )?;
                save_sft_set(&dir.join("sft.jsonl"), &convos)?;
                convos
            }
        };
        let hp = SftHyperparams {
            batch_size: cfg.usize_("sft.batch")?,
            lr: cfg.f64_("sft.lr")?,
            steps: cfg.u64_("sft.steps")?,
            weight_decay: cfg.f64_("sft.weight_decay")?,
            beta1: cfg.f64_("sft.beta1")?,
            beta2: cfg.f64_("sft.beta2")?,
            seed: cfg.u64_("seed")?,
        };
        let out = instruction_tune(&mut model, &samples, &vocab, &hp)?;
        if out.skipped > 0 {
            eprintln!(
                "warning: skipped {} samples longer than the context window",
                out.skipped
            );
        }
        let ckpt = dir.join("model.ckpt");
        model.save(&ckpt)?;
        fs::write(dir.join("metrics.csv"), &out.outcome.metrics_csv)?;
        write_manifest(
            &dir,
            "sft",
            cfg,
            &[
                ("checkpoint", ckpt.display().to_string()),
                ("samples", samples.len().to_string()),
                ("skipped", out.skipped.to_string()),
                (
                    "final_train_loss",
                    format!("{:.6}", out.outcome.final_train_loss),
                ),
            ],
        )?;
        println!(
            "sft: {} samples ({} skipped), final loss {:.4}",
            samples.len(),
            out.skipped,
            out.outcome.final_train_loss
        );
        Ok(())
    }
}

struct EvalCmd;

impl PrecisionCmd for EvalCmd {
    fn run<T: Scalar>(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let dir = out_dir(cfg)?;
        let vocab = load_vocab(cfg)?;
        let model = RetroModel::<T>::from_checkpoint(&cfg.path("data.ckpt")?)?;
        let examples = load_eval_set(&cfg.path("eval.set")?)?;
        let db;
        let index;
        let retrieval = match (cfg.get("data.db"), cfg.get("data.index")) {
            (Some(dp), Some(ip)) if !dp.is_empty() && !ip.is_empty() => {
                db = ChunkDatabase::load(Path::new(dp))?;
                index = AnnIndex::load(Path::new(ip))?;
                Some((&db, &index))
            }
            _ => None,
        };
        let eval_cfg = EvalConfig {
            prompt_k: cfg.usize_("eval.prompt_k")?,
            encoder_gate: cfg.gate("eval.gate")?,
            max_new: cfg.usize_("eval.max_new")?,
            max_prompt_tokens: cfg
                .get("eval.max_prompt_tokens")
                .and_then(|v| v.parse().ok())
                .unwrap_or(model.config.max_seq),
            nprobe: cfg.usize_("index.nprobe")?,
            ef_search: cfg.usize_("index.ef_search")?,
        };
        let report = evaluate(&model, &vocab, &examples, retrieval, &PromptTemplate::default(), &eval_cfg)?;
        fs::write(dir.join("report.csv"), report.to_csv())?;
        let summary = report.summary();
        fs::write(dir.join("summary.txt"), &summary)?;
        write_manifest(&dir, "eval", cfg, &[("examples", examples.len().to_string())])?;
        print!("{summary}");
        Ok(())
    }
}

struct GenerateCmd;

impl PrecisionCmd for GenerateCmd {
    fn run<T: Scalar>(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let vocab = load_vocab(cfg)?;
        let model = RetroModel::<T>::from_checkpoint(&cfg.path("data.ckpt")?)?;
        let prompt_text = cfg.require("gen.prompt")?;
        let prompt = vocab.tokenize(prompt_text);
        let max_new = cfg.usize_("gen.max_new")?;
        let gate_on = cfg.get("gen.gate").map(|v| v == "1" || v == "on") == Some(true);
        let generated = if gate_on {
            let db = ChunkDatabase::load(&cfg.path("data.db")?)?;
            let index = AnnIndex::load(&cfg.path("data.index")?)?;
            let opts = query_opts(cfg, &index)?;
            greedy_decode_with_encoder(&model, &prompt, max_new, &db, &index, &opts)?
        } else {
            greedy_decode(&model, &prompt, max_new)?
        };
        let text = vocab.detokenize(&generated);
        println!("{}", truncate_generation(&text));
        if let Some(out) = cfg.get("out") {
            let dir = PathBuf::from(out);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("generation.txt"), text)?;
            write_manifest(&dir, "generate", cfg, &[])?;
        }
        Ok(())
    }
}

struct PplCmd;

impl PrecisionCmd for PplCmd {
    fn run<T: Scalar>(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let dir = out_dir(cfg)?;
        let model = RetroModel::<T>::from_checkpoint(&cfg.path("data.ckpt")?)?;
        let dataset = TokenDataset::load(&cfg.path("data.dataset")?)?;
        let gate = cfg.gate("ppl.gate")?;
        let db;
        let nf;
        let retrieval = match (cfg.get("data.db"), cfg.get("data.neighbors")) {
            (Some(dp), Some(np)) if gate == 1 && !dp.is_empty() && !np.is_empty() => {
                db = ChunkDatabase::load(Path::new(dp))?;
                nf = NeighborFile::load(Path::new(np))?;
                Some((&db, &nf))
            }
            _ => None,
        };
        let ppl = perplexity(&model, &dataset, retrieval, gate, None)?;
        fs::write(dir.join("ppl.txt"), format!("{ppl:.6}\n"))?;
        write_manifest(&dir, "ppl", cfg, &[("perplexity", format!("{ppl:.6}"))])?;
        println!("perplexity: {ppl:.6}");
        Ok(())
    }
}
