//! Optimization loop: AdamW with linear warmup and decay, global-norm
//! clipping, periodic checkpoints and a JSON-lines metrics log.
//!
//! Every source of randomness is seeded. The batch for step `t` is a pure
//! function of `(seed, t)` and the dropout stream is saved in checkpoints,
//! so a resumed run continues exactly where the original left off.

mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};

use crate::corpus::Dialog;
use crate::error::{Error, Result};
use crate::featurizer::{batch, encode_with_passage, EncodedWindow, FeaturizerConfig};
use crate::history::{instance_for_turn, SelectorConfig};
use crate::model::{decays, forward_backward, init_params, ModelConfig, ModelParams, Scalar};
use crate::tokenizer::{Tokenizer, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled weight decay; never applied to biases or layer-norm parameters.
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    /// Global gradient-norm bound, or `None` to disable clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            total_steps: 0,
            batch_size: 12,
            checkpoint_every: 1000,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail(format!("betas ({b1}, {b2}) outside [0, 1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return fail("eps must be positive and weight_decay non-negative".into());
        }
        if self.total_steps == 0 {
            return fail("total_steps must be set to a positive value".into());
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return fail("batch_size and checkpoint_every must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).floor() as u64
    }
}

/// Learning rate for the update that follows `step` completed updates:
/// linear warmup from 0 to `lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let total = config.total_steps;
    let step = step.min(total);
    let warm = config.warmup_steps();
    if step < warm {
        config.lr * (step as f64 / warm as f64)
    } else {
        config.lr * ((total - step) as f64 / (total - warm) as f64)
    }
}

/// Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update. Nothing is modified when the update would produce a
/// non-finite value.
pub fn adamw_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptimizerState<F>,
    lr_t: f64,
    config: &TrainConfig,
) -> Result<()> {
    let step = state.step + 1;
    let (b1, b2) = config.betas;
    let c1 = F::lit(1.0 - b1.powi(step as i32));
    let c2 = F::lit(1.0 - b2.powi(step as i32));
    let (b1, b2) = (F::lit(b1), F::lit(b2));
    let (one, eps, lr) = (F::one(), F::lit(config.eps), F::lit(lr_t));

    let mut new_p = params.clone();
    let mut new_m = state.m.clone();
    let mut new_v = state.v.clone();
    let groups = new_p
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(new_m.tensors_mut())
        .zip(new_v.tensors_mut());
    for ((((name, mut p), (_, g)), (_, mut m)), (_, mut v)) in groups {
        let lambda = F::lit(if decays(&name) { config.weight_decay } else { 0.0 });
        Zip::from(&mut p)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + lambda * *p);
            });
        if p.iter().chain(m.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("optimizer update of {name}")));
        }
    }
    *params = new_p;
    state.m = new_m;
    state.v = new_v;
    state.step = step;
    Ok(())
}

/// Everything that determines a training run besides the data and vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub featurizer: FeaturizerConfig,
    /// Number of previous turns the history selector keeps.
    pub history_turns: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.featurizer.validate()?;
        SelectorConfig::new(self.history_turns)?;
        if self.model.max_positions < self.featurizer.max_seq_len {
            return Err(Error::Config(format!(
                "max_positions ({}) is smaller than max_seq_len ({})",
                self.model.max_positions, self.featurizer.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Featurizes every turn under gold history and keeps the windows that
/// contain their gold span.
pub fn training_windows(
    dialogs: &[Dialog],
    tokenizer: &Tokenizer,
    featurizer: &FeaturizerConfig,
    history_turns: usize,
) -> Result<Vec<EncodedWindow>> {
    let selector = SelectorConfig::new(history_turns)?;
    let mut out = Vec::new();
    for dialog in dialogs {
        let passage = tokenizer.tokenize(&dialog.passage.text);
        for k in 1..=dialog.turns.len() {
            let instance = instance_for_turn(dialog, k, &selector, None)?;
            let windows = encode_with_passage(&instance, &passage, tokenizer, featurizer)?;
            out.extend(windows.into_iter().filter(|w| w.labels.is_some()));
        }
    }
    if out.is_empty() {
        return Err(Error::AllWindowsDropped);
    }
    Ok(out)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Milliseconds spent in the step; 0 unless wall-clock logging is on, so
    /// that logs of identical runs are byte-identical.
    pub wall_ms: u64,
}

pub struct Trainer {
    state: Checkpoint,
    windows: Vec<EncodedWindow>,
    rng: ChaCha8Rng,
    wall_clock: bool,
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Trainer {
    /// Fresh run: parameters initialized from `config.model.seed`.
    pub fn new(config: RunConfig, vocab: &Vocab, windows: Vec<EncodedWindow>) -> Result<Self> {
        config.validate()?;
        if config.model.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match vocabulary of {} tokens",
                config.model.vocab_size,
                vocab.len()
            )));
        }
        let params = init_params::<f32>(&config.model)?;
        let optimizer = OptimizerState::new(&params);
        let rng = dropout_rng(config.train.seed);
        let state = Checkpoint {
            config,
            vocab: vocab.tokens().to_vec(),
            step: 0,
            rng: RngState::capture(&rng),
            params,
            optimizer,
        };
        Self::start(state, windows, rng)
    }

    /// Continues from a saved state. `windows` must be built from the same
    /// data and settings as the original run.
    pub fn resume(checkpoint: Checkpoint, windows: Vec<EncodedWindow>) -> Result<Self> {
        checkpoint.config.validate()?;
        let rng = checkpoint.rng.restore()?;
        Self::start(checkpoint, windows, rng)
    }

    fn start(state: Checkpoint, windows: Vec<EncodedWindow>, rng: ChaCha8Rng) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::AllWindowsDropped);
        }
        if windows.iter().any(|w| w.labels.is_none()) {
            return Err(Error::DroppedLabel);
        }
        Ok(Trainer {
            state,
            windows,
            rng,
            wall_clock: false,
        })
    }

    /// Record real step durations in the metrics log.
    pub fn with_wall_clock(mut self, on: bool) -> Self {
        self.wall_clock = on;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn config(&self) -> &RunConfig {
        &self.state.config
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.state.params
    }

    pub fn windows(&self) -> &[EncodedWindow] {
        &self.windows
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.state.clone();
        c.rng = RngState::capture(&self.rng);
        c
    }

    pub fn into_checkpoint(mut self) -> Checkpoint {
        self.state.rng = RngState::capture(&self.rng);
        self.state
    }

    /// Applies one update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let cfg = &self.state.config.train;
        let t = self.state.step;
        if t >= cfg.total_steps {
            return Err(Error::Config(format!("training already finished at step {t}")));
        }
        let per_epoch = self.windows.len().div_ceil(cfg.batch_size) as u64;
        let (epoch, index) = (t / per_epoch, (t % per_epoch) as usize);
        let batches = batch(&self.windows, cfg.batch_size, Some(epoch_seed(cfg.seed, epoch)));
        let (loss, mut grads) = forward_backward(&batches[index].windows, &self.state.params, Some(&mut self.rng))?;
        if let Some(bound) = cfg.clip_norm {
            let norm = grads.global_norm();
            if norm > bound {
                grads.scale((bound / norm) as f32);
            }
        }
        let lr = lr_at(t, cfg);
        adamw_step(&mut self.state.params, &grads, &mut self.state.optimizer, lr, cfg)?;
        self.state.step = t + 1;
        Ok(StepRecord {
            step: t + 1,
            lr,
            loss: loss as f64,
            wall_ms: if self.wall_clock { started.elapsed().as_millis() as u64 } else { 0 },
        })
    }

    /// Steps until `until` (capped at `total_steps`). With `out_dir`, writes
    /// `ckpt-{step}.bin` every `checkpoint_every` steps and at the final step;
    /// with `log`, appends one JSON line per step.
    pub fn run(
        &mut self,
        until: Option<u64>,
        out_dir: Option<&Path>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<RunSummary> {
        let total = self.state.config.train.total_steps;
        let until = until.unwrap_or(total).min(total);
        let every = self.state.config.train.checkpoint_every;
        let mut summary = RunSummary::default();
        while self.state.step < until {
            let record = self.step()?;
            if let Some(out) = log.as_deref_mut() {
                let line = serde_json::to_string(&record).expect("plain struct");
                writeln!(out, "{line}").map_err(|e| Error::io("metrics log", e))?;
            }
            if let Some(dir) = out_dir {
                if record.step % every == 0 || record.step == total {
                    let path = dir.join(format!("ckpt-{}.bin", record.step));
                    save_checkpoint(&path, &self.checkpoint())?;
                    summary.checkpoints.push(path);
                }
            }
            summary.records.push(record);
        }
        Ok(summary)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Full run from scratch on `dialogs`. With `out_dir`, checkpoints and
/// `metrics.jsonl` are written there.
pub fn train(
    dialogs: &[Dialog],
    tokenizer: &Tokenizer,
    config: RunConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, RunSummary)> {
    config.validate()?;
    let windows = training_windows(dialogs, tokenizer, &config.featurizer, config.history_turns)?;
    let mut trainer = Trainer::new(config, tokenizer.vocab(), windows)?;
    let summary = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            trainer.run(None, Some(dir), Some(&mut file))?
        }
        None => trainer.run(None, None, None)?,
    };
    Ok((trainer.into_checkpoint(), summary))
}
