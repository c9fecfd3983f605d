//! Flat key-value run configuration. The same set of keys can come from a
//! TOML file or from command-line flags; flags win, then the file, then the
//! built-in defaults.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use clap::Args;
use serde::Deserialize;

use crate::featurizer::{FeaturizerConfig, HistoryMode};
use crate::inference::{HistorySource, PredictConfig};
use crate::model::ModelConfig;
use crate::trainer::{RunConfig, TrainConfig};

/// Every setting is optional here; unset values fall through to the next
/// source. `clip_norm = 0` disables gradient clipping.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Seed for initialization, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// History modeling: none, hae, phqa or pha.
    #[arg(long)]
    pub history_mode: Option<HistoryMode>,
    /// Number of previous turns to condition on.
    #[arg(long)]
    pub j: Option<usize>,
    /// Previous answers at prediction time: gold or predicted.
    #[arg(long)]
    pub history_source: Option<HistorySource>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Sliding-window stride in tokens.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub max_question_len: Option<usize>,
    #[arg(long)]
    pub max_answer_len: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_size: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm bound; 0 disables clipping.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub n_best: Option<usize>,
}

macro_rules! layer {
    ($top:ident, $bottom:ident, $($field:ident),*) => {
        Overrides { $($field: $top.$field.or($bottom.$field)),* }
    };
}

impl Overrides {
    /// Values of `self` where set, otherwise those of `lower`.
    pub fn over(self, lower: Overrides) -> Overrides {
        layer!(
            self, lower, seed, history_mode, j, history_source, max_seq_len, stride,
            max_question_len, max_answer_len, batch_size, lr, total_steps, checkpoint_every,
            hidden, layers, heads, ffn_size, max_positions, dropout, warmup_fraction,
            weight_decay, clip_norm, n_best
        )
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Overrides> {
        let raw = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Flags layered over the optional config file.
    pub fn resolve(config: Option<&Path>, flags: Overrides) -> anyhow::Result<Overrides> {
        let file = match config {
            Some(path) => Overrides::from_file(path)?,
            None => Overrides::default(),
        };
        Ok(flags.over(file))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn history_mode(&self) -> HistoryMode {
        self.history_mode.unwrap_or(HistoryMode::Hae)
    }

    pub fn j(&self) -> usize {
        self.j.unwrap_or(6)
    }

    pub fn featurizer(&self) -> FeaturizerConfig {
        let d = FeaturizerConfig::default();
        FeaturizerConfig {
            max_seq_len: self.max_seq_len.unwrap_or(d.max_seq_len),
            doc_stride: self.stride.unwrap_or(d.doc_stride),
            max_question_len: self.max_question_len.unwrap_or(d.max_question_len),
            history_mode: self.history_mode(),
        }
    }

    pub fn predict(&self) -> PredictConfig {
        let d = PredictConfig::default();
        PredictConfig {
            max_answer_len: self.max_answer_len.unwrap_or(d.max_answer_len),
            n_best: self.n_best.unwrap_or(d.n_best),
            history_source: self.history_source.unwrap_or(d.history_source),
        }
    }

    pub fn run_config(&self, vocab_size: usize) -> anyhow::Result<RunConfig> {
        let Some(total_steps) = self.total_steps else {
            bail!("total_steps is required (set --total-steps or total_steps in the config file)");
        };
        let base = ModelConfig::base(vocab_size);
        let train = TrainConfig::default();
        let featurizer = self.featurizer();
        let config = RunConfig {
            model: ModelConfig {
                vocab_size,
                hidden: self.hidden.unwrap_or(base.hidden),
                layers: self.layers.unwrap_or(base.layers),
                heads: self.heads.unwrap_or(base.heads),
                ffn_size: self.ffn_size.unwrap_or(base.ffn_size),
                max_positions: self.max_positions.unwrap_or(base.max_positions),
                dropout_rate: self.dropout.unwrap_or(base.dropout_rate),
                use_hae: featurizer.history_mode == HistoryMode::Hae,
                seed: self.seed(),
            },
            train: TrainConfig {
                lr: self.lr.unwrap_or(train.lr),
                weight_decay: self.weight_decay.unwrap_or(train.weight_decay),
                warmup_fraction: self.warmup_fraction.unwrap_or(train.warmup_fraction),
                total_steps,
                batch_size: self.batch_size.unwrap_or(train.batch_size),
                checkpoint_every: self.checkpoint_every.unwrap_or(train.checkpoint_every),
                clip_norm: match self.clip_norm {
                    Some(c) if c == 0.0 => None,
                    Some(c) => Some(c),
                    None => train.clip_norm,
                },
                seed: self.seed(),
                ..train
            },
            featurizer,
            history_turns: self.j(),
        };
        config.validate()?;
        Ok(config)
    }
}
