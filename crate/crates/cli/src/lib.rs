//! Command-line pipeline: corpus prep, index build, neighbor precompute,
//! pretraining, retro-fit / GPT-fit, instruction tuning, and evaluation.

pub mod commands;
pub mod config;

use config::RunConfig;

/// Process-level error classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1: bad invocation, unknown command, missing/invalid config.
    Usage(String),
    /// Exit 2: unreadable or inconsistent data.
    Data(String),
    /// Exit 3: training aborted (divergence or non-finite gradients).
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }
}

impl From<minretro::corpus::CorpusError> for CliError {
    fn from(e: minretro::corpus::CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<minretro::retrieval::RetrievalError> for CliError {
    fn from(e: minretro::retrieval::RetrievalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<minretro::model::ModelError> for CliError {
    fn from(e: minretro::model::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<minretro::evalgen::EvalError> for CliError {
    fn from(e: minretro::evalgen::EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<minretro::training::TrainError> for CliError {
    fn from(e: minretro::training::TrainError) -> Self {
        match e {
            minretro::training::TrainError::Diverged { .. }
            | minretro::training::TrainError::NonFiniteGradient { .. } => {
                CliError::Divergence(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub const COMMANDS: [&str; 10] = [
    "prepare-corpus",
    "build-index",
    "precompute-neighbors",
    "pretrain",
    "retrofit",
    "gpt-fit",
    "sft",
    "eval",
    "generate",
    "ppl",
];

pub const USAGE: &str = "usage: minretro <command> [--config FILE] [key=value ...] [flags]\n\
commands: prepare-corpus, build-index, precompute-neighbors, pretrain,\n\
          retrofit, gpt-fit, sft, eval, generate, ppl, validate <command>\n\
flags:    --freeze-decoder        (retrofit)\n\
          --gate on|off           (retrofit, sft, eval, generate, ppl)\n\
          --nprobe N --ef-search N (retrieval breadth)\n";

/// Parses arguments into (command, config); flags become config overrides.
pub fn parse_args(args: &[String]) -> Result<(String, RunConfig), CliError> {
    if args.is_empty() {
        return Err(CliError::Usage(format!("no command given\n{USAGE}")));
    }
    let command = args[0].clone();
    let mut cfg = RunConfig::defaults();
    // Apply --config first so explicit key=value arguments win.
    let mut i = 1;
    let mut overrides: Vec<(String, String)> = Vec::new();
    while i < args.len() {
        let a = &args[i];
        match a.as_str() {
            "--config" => {
                i += 1;
                let path = args
                    .get(i)
                    .ok_or_else(|| CliError::Usage("--config needs a file path".into()))?;
                let file_cfg = RunConfig::load(std::path::Path::new(path))?;
                cfg = file_cfg;
            }
            "--freeze-decoder" => {
                overrides.push(("retrofit.freeze_decoder".into(), "true".into()));
            }
            "--gate" => {
                i += 1;
                let v = args
                    .get(i)
                    .ok_or_else(|| CliError::Usage("--gate needs on or off".into()))?;
                let key = match command.as_str() {
                    "eval" => "eval.gate",
                    "ppl" => "ppl.gate",
                    "generate" => "gen.gate",
                    _ => "model.gate",
                };
                overrides.push((key.into(), v.clone()));
            }
            "--nprobe" => {
                i += 1;
                let v = args
                    .get(i)
                    .ok_or_else(|| CliError::Usage("--nprobe needs a value".into()))?;
                overrides.push(("index.nprobe".into(), v.clone()));
            }
            "--ef-search" => {
                i += 1;
                let v = args
                    .get(i)
                    .ok_or_else(|| CliError::Usage("--ef-search needs a value".into()))?;
                overrides.push(("index.ef_search".into(), v.clone()));
            }
            other => match other.split_once('=') {
                Some((k, v)) => overrides.push((k.trim().into(), v.trim().into())),
                None => {
                    return Err(CliError::Usage(format!(
                        "unrecognized argument {other}\n{USAGE}"
                    )))
                }
            },
        }
        i += 1;
    }
    for (k, v) in overrides {
        cfg.set(&k, &v);
    }
    Ok((command, cfg))
}

/// Runs one command; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let (command, cfg) = match parse_args(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return e.exit_code();
        }
    };
    if command == "validate" {
        // `minretro validate <command> ...` reports problems and exits.
        let target = match args.get(1) {
            Some(t) => t.clone(),
            None => {
                eprintln!("error: validate needs a command name");
                return 1;
            }
        };
        let (_, cfg) = match parse_args(&args[1..]) {
            Ok(x) => x,
            Err(e) => {
                eprintln!("error: {}", e.message());
                return e.exit_code();
            }
        };
        let problems = cfg.validate(&target);
        for p in &problems {
            println!("problem: {p}");
        }
        return if problems.is_empty() { 0 } else { 1 };
    }
    if !COMMANDS.contains(&command.as_str()) {
        eprintln!("error: unknown command {command}\n{USAGE}");
        return 1;
    }
    let problems = cfg.validate(&command);
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("config problem: {p}");
        }
        return 1;
    }
    match commands::dispatch(&command, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
