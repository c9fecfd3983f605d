//! Command-line entry points: train, predict, evaluate, sweep, synth and
//! validate. Exit codes: 0 success, 1 runtime or data error, 2 usage error.

pub mod config;
pub mod sweep;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use crate::corpus::{load_dataset, save_dataset, validate_dataset, Dialog, LoadOptions, SourceFormat};
use crate::featurizer::HistoryMode;
use crate::metrics::{evaluate_files, EvalOptions};
use crate::inference::{predict_dataset, write_predictions, HistorySource, PredictConfig};
use crate::synthdata::{generate, SynthConfig};
use crate::tokenizer::{load_vocab, Tokenizer, Vocab};
use crate::trainer::{load_checkpoint, training_windows, Trainer};

pub use config::Overrides;
pub use sweep::{run_sweep, write_csv, Cell, CellResult, SweepPlan};

#[derive(Debug, Parser)]
#[command(name = "convqa", version, about = "Conversational QA with history answer embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints and metrics.jsonl under --out.
    Train(TrainArgs),
    /// Predict answers for every turn of a dataset.
    Predict(PredictArgs),
    /// Score a predictions file against a dataset.
    Evaluate(EvaluateArgs),
    /// Train and score one model per (history mode, j, seed) cell.
    Sweep(SweepArgs),
    /// Write a synthetic coreference dataset.
    Synth(SynthArgs),
    /// Check a dataset and report offset problems.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum DataFormat {
    #[default]
    Native,
    Quac,
}

#[derive(Debug, clap::Args)]
pub struct DataArgs {
    /// Dataset JSON file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = DataFormat::Native)]
    pub format: DataFormat,
    /// Append the CANNOTANSWER token to every passage.
    #[arg(long)]
    pub append_cannot_answer: bool,
}

impl DataArgs {
    fn options(&self) -> LoadOptions {
        LoadOptions {
            append_cannot_answer: self.append_cannot_answer,
            format: match self.format {
                DataFormat::Native => SourceFormat::Native,
                DataFormat::Quac => SourceFormat::Quac,
            },
        }
    }

    fn load(&self) -> anyhow::Result<Vec<Dialog>> {
        load_dataset(&self.data, self.options()).with_context(|| format!("loading {}", self.data.display()))
    }
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Flat TOML file with run settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for checkpoints, metrics.jsonl and vocab.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file, one token per line; built from the data if absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Record elapsed milliseconds in the metrics log (makes it non-reproducible).
    #[arg(long)]
    pub wall_clock: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Predictions file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary to use instead of the one stored in the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = HistorySource::Gold)]
    pub history_source: HistorySource,
    #[arg(long, default_value_t = PredictConfig::default().max_answer_len)]
    pub max_answer_len: usize,
    #[arg(long, default_value_t = PredictConfig::default().n_best)]
    pub n_best: usize,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Reference dataset JSON file.
    #[arg(long)]
    pub data: PathBuf,
    /// Write the report here as JSON as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only score questions whose human F1 reaches this value.
    #[arg(long)]
    pub min_human_f1: Option<f64>,
    /// Score against the first reference only.
    #[arg(long)]
    pub first_reference_only: bool,
}

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset.
    #[command(flatten)]
    pub data: DataArgs,
    /// Evaluation dataset.
    #[arg(long)]
    pub dev: PathBuf,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// History depths to try, e.g. 0,1,2,4.
    #[arg(long, value_delimiter = ',', default_values_t = (0..=11).collect::<Vec<usize>>())]
    pub j_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64])]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = HistoryMode::ALL.to_vec())]
    pub modes: Vec<HistoryMode>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().n_dialogs)]
    pub n_dialogs: usize,
    #[arg(long, default_value_t = SynthConfig::default().turns_per_dialog)]
    pub turns: usize,
    #[arg(long, default_value_t = SynthConfig::default().passage_len_tokens)]
    pub passage_len: usize,
    #[arg(long, default_value_t = SynthConfig::default().vocab_size)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().coreference_rate)]
    pub coreference_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().answer_len)]
    pub answer_len: usize,
}

#[derive(Debug, clap::Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

/// Whole-word vocabulary over passages and questions.
pub fn dataset_vocab(dialogs: &[Dialog]) -> Vocab {
    let texts = dialogs
        .iter()
        .flat_map(|d| std::iter::once(d.passage.text.as_str()).chain(d.turns.iter().map(|t| t.question.as_str())));
    Vocab::from_texts(texts)
}

fn vocab_for(path: Option<&Path>, dialogs: &[Dialog]) -> anyhow::Result<Vocab> {
    match path {
        Some(p) => load_vocab(p).with_context(|| format!("loading vocabulary {}", p.display())),
        None => Ok(dataset_vocab(dialogs)),
    }
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let settings = Overrides::resolve(args.config.as_deref(), args.overrides.clone())?;
    let dialogs = args.data.load()?;
    let vocab = vocab_for(args.vocab.as_deref(), &dialogs)?;
    let config = settings.run_config(vocab.len())?;
    let tokenizer = Tokenizer::new(vocab);
    let windows = training_windows(&dialogs, &tokenizer, &config.featurizer, config.history_turns)?;
    let mut trainer = Trainer::new(config, tokenizer.vocab(), windows)?.with_wall_clock(args.wall_clock);

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    tokenizer.vocab().save(args.out.join("vocab.txt"))?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut log = BufWriter::new(
        File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let summary = trainer.run(None, Some(&args.out), Some(&mut log))?;
    log.flush()?;
    if let Some(last) = summary.records.last() {
        eprintln!(
            "trained {} steps on {} windows, final loss {:.4}; {} checkpoints in {}",
            last.step,
            trainer.windows().len(),
            last.loss,
            summary.checkpoints.len(),
            args.out.display()
        );
    }
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let vocab = match &args.vocab {
        Some(path) => {
            let v = load_vocab(path).with_context(|| format!("loading vocabulary {}", path.display()))?;
            if v.len() != ckpt.config.model.vocab_size {
                bail!(
                    "vocabulary {} has {} tokens but the checkpoint expects {}",
                    path.display(),
                    v.len(),
                    ckpt.config.model.vocab_size
                );
            }
            v
        }
        None => Vocab::from_tokens(ckpt.vocab.iter().map(String::as_str))?,
    };
    let tokenizer = Tokenizer::new(vocab);
    let dialogs = args.data.load()?;
    let predict = PredictConfig {
        max_answer_len: args.max_answer_len,
        n_best: args.n_best,
        history_source: args.history_source,
    };
    predict.validate()?;
    let predictions = predict_dataset(
        &dialogs,
        &ckpt.params,
        &tokenizer,
        &ckpt.config.featurizer,
        ckpt.config.history_turns,
        &predict,
    )?;
    create_parent(&args.out)?;
    let mut out = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    write_predictions(&mut out, &predictions)?;
    out.flush()?;
    eprintln!("wrote {} predictions to {}", predictions.len(), args.out.display());
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let options = EvalOptions {
        min_human_f1: args.min_human_f1,
        first_reference_only: args.first_reference_only,
    };
    let report = evaluate_files(&args.predictions, &args.data, &options)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        create_parent(path)?;
        fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{json}");
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<Vec<CellResult>> {
    let settings = Overrides::resolve(args.config.as_deref(), args.overrides.clone())?;
    let train_set = args.data.load()?;
    let dev_set = load_dataset(&args.dev, args.data.options()).with_context(|| format!("loading {}", args.dev.display()))?;
    let vocab = vocab_for(args.vocab.as_deref(), &train_set)?;
    let base = settings.run_config(vocab.len())?;
    let predict = settings.predict();
    predict.validate()?;
    let plan = SweepPlan {
        modes: args.modes.clone(),
        j_values: args.j_values.clone(),
        seeds: args.seeds.clone(),
    };
    let tokenizer = Tokenizer::new(vocab);
    let results = run_sweep(&train_set, &dev_set, &tokenizer, &base, &predict, &plan)?;
    create_parent(&args.out)?;
    let mut out = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    write_csv(&mut out, &results)?;
    out.flush()?;
    let failed = results.iter().filter(|r| r.report.is_err()).count();
    eprintln!("{} cells, {failed} failed; table in {}", results.len(), args.out.display());
    Ok(results)
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let config = SynthConfig {
        n_dialogs: args.n_dialogs,
        turns_per_dialog: args.turns,
        passage_len_tokens: args.passage_len,
        vocab_size: args.vocab_size,
        seed: args.seed,
        coreference_rate: args.coreference_rate,
        answer_len: args.answer_len,
    };
    let dialogs = generate(&config)?;
    create_parent(&args.out)?;
    save_dataset(&args.out, &dialogs)?;
    eprintln!("wrote {} dialogs to {}", dialogs.len(), args.out.display());
    Ok(())
}

pub fn cmd_validate(args: &ValidateArgs) -> anyhow::Result<()> {
    let dialogs = args.data.load()?;
    let report = validate_dataset(&dialogs);
    for m in &report.messages {
        println!("{m}");
    }
    println!(
        "{} dialogs, {} turns, {} errors, {} warnings",
        report.dialogs, report.turns, report.errors, report.warnings
    );
    if report.errors > 0 {
        bail!("{} offset errors", report.errors);
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code().clamp(0, 255) as u8;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a).map(|_| ()),
        Command::Synth(a) => cmd_synth(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e:#}");
            1
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
