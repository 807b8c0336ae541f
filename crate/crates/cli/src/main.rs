use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use capsule_nlu::config::{Mode, Preset, TrainConfig};
use capsule_nlu::data::{load_split, LoadOptions, Split, Utterance};
use capsule_nlu::export::export_agreements;
use capsule_nlu::trainer::{self, Checkpoint};

/// Joint slot filling and intent detection with capsule routing.
#[derive(Parser, Debug)]
#[command(name = "capsule-nlu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint, vocabularies and metrics log.
    Train(TrainArgs),
    /// Score a checkpoint on a data split.
    Eval(EvalArgs),
    /// Tag utterances and classify their intent.
    Predict(PredictArgs),
    /// Write the routing agreements of one utterance as CSV files.
    ExportAgreements(ExportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory with train/ and valid/ splits.
    #[arg(long)]
    data_dir: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint path (default: <out>/model.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// TOML config; replaces the preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config value, e.g. `--set optimizer.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Where to write the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Whitespace-tokenized utterance.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    text: Option<String>,
    /// File with one utterance per line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Where to write JSON lines (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    text: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "valid" | "dev" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (expected train, valid or test)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::ExportAgreements(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn require_dir(path: &Path) -> Result<()> {
    ensure!(path.is_dir(), "directory {} does not exist", path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    ensure!(path.is_file(), "checkpoint {} does not exist", path.display());
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn build_config(a: &TrainArgs) -> Result<TrainConfig> {
    let base = match &a.config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => TrainConfig::preset(a.preset.unwrap_or(Preset::Desk)),
    };
    let mut overrides = Vec::new();
    if let Some(m) = a.mode {
        overrides.push(format!("mode={m}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(a.overrides.iter().cloned());
    let cfg = base.with_overrides(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_options(cfg: &TrainConfig) -> LoadOptions {
    LoadOptions {
        lowercase: cfg.training.lowercase,
        ..LoadOptions::default()
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = build_config(&a)?;
    require_dir(&a.data_dir)?;
    let opts = load_options(&cfg);
    let train = load_split(&a.data_dir, Split::Train, opts)?;
    let valid = load_split(&a.data_dir, Split::Valid, opts)?;
    log::info!(
        "{} training and {} validation utterances, mode {}",
        train.len(),
        valid.len(),
        cfg.mode
    );

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join("metrics.jsonl");
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut write_err = None;
    let outcome = trainer::train(&cfg, &train, &valid, |e| {
        log::info!(
            "{} epoch {}: train {:.4} valid {:.4} slot_f1 {:.4}{}{}",
            e.stage,
            e.epoch,
            e.train_loss,
            e.valid_loss,
            e.valid_slot_f1,
            e.valid_intent_acc
                .map(|v| format!(" intent_acc {v:.4}"))
                .unwrap_or_default(),
            if e.improved { " *" } else { "" },
        );
        let line = serde_json::to_string(e).expect("epoch log serializes");
        if let Err(err) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }

    let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| a.out.join("model.json"));
    outcome.checkpoint.save(&ckpt_path)?;
    let vocab_dir = a.out.join("vocab");
    outcome
        .checkpoint
        .vocab
        .save_lists(&vocab_dir)
        .with_context(|| format!("writing {}", vocab_dir.display()))?;
    let cfg_path = a.out.join("config.toml");
    fs::write(&cfg_path, outcome.checkpoint.config.to_toml_string())
        .with_context(|| format!("writing {}", cfg_path.display()))?;
    log::info!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    require_dir(&a.data_dir)?;
    let utts = load_split(&a.data_dir, a.split, load_options(&ckpt.config))?;
    let report = trainer::evaluate(&ckpt, &utts)?;
    print!("{}", report.to_key_values());
    if let Some(out) = &a.out {
        write_file(out, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn tokenize(line: &str, lowercase: bool) -> Vec<String> {
    line.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let lines: Vec<String> = match (&a.text, &a.input) {
        (Some(t), _) => vec![t.clone()],
        (None, Some(path)) => fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::to_string)
            .collect(),
        (None, None) => unreachable!("clap requires --text or --input"),
    };
    ensure!(!lines.is_empty(), "no utterances to predict");
    let lowercase = ckpt.config.training.lowercase;
    let mut utts = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let tokens = tokenize(line, lowercase);
        if tokens.is_empty() {
            bail!("utterance {} is empty", i + 1);
        }
        let tags = vec!["O".to_string(); tokens.len()];
        utts.push(Utterance::new(tokens, tags, ""));
    }
    let mut out = String::new();
    for p in trainer::predict(&ckpt, &utts)? {
        out.push_str(&serde_json::to_string(&p)?);
        out.push('\n');
    }
    match &a.out {
        Some(path) => write_file(path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let tokens = tokenize(&a.text, ckpt.config.training.lowercase);
    ensure!(!tokens.is_empty(), "utterance is empty");
    let files = export_agreements(&ckpt, &tokens, &a.out)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
