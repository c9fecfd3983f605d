//! History-depth sweeps: one model per (mode, j, seed) cell, each trained
//! and scored independently.

use std::io::Write;

use rayon::prelude::*;

use crate::corpus::Dialog;
use crate::error::{Error, Result};
use crate::featurizer::HistoryMode;
use crate::inference::{predict_dataset, PredictConfig, PredictionRecord};
use crate::metrics::{evaluate_predictions, EvalOptions, EvalReport};
use crate::tokenizer::Tokenizer;
use crate::trainer::{train, RunConfig};

/// Trains on `train_set` and scores predictions on `dev_set`.
pub fn train_and_evaluate(
    train_set: &[Dialog],
    dev_set: &[Dialog],
    tokenizer: &Tokenizer,
    config: &RunConfig,
    predict: &PredictConfig,
) -> Result<EvalReport> {
    let (ckpt, _) = train(train_set, tokenizer, config.clone(), None)?;
    let predictions = predict_dataset(
        dev_set,
        &ckpt.params,
        tokenizer,
        &config.featurizer,
        config.history_turns,
        predict,
    )?;
    let records: Vec<PredictionRecord> = predictions.iter().map(PredictionRecord::from).collect();
    evaluate_predictions(dev_set, &records, &EvalOptions::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub modes: Vec<HistoryMode>,
    pub j_values: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one mode and one seed".into()));
        }
        if self.modes.iter().any(|m| *m != HistoryMode::None) && self.j_values.is_empty() {
            return Err(Error::Config("sweep needs at least one j value".into()));
        }
        if let Some(j) = self.j_values.iter().find(|j| **j > crate::history::DEFAULT_MAX_HISTORY) {
            return Err(Error::Config(format!(
                "j = {j} outside 0..={}",
                crate::history::DEFAULT_MAX_HISTORY
            )));
        }
        Ok(())
    }

    /// Cells in output order. `none` ignores j and gets one cell per seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &mode in &self.modes {
            if mode == HistoryMode::None {
                cells.extend(self.seeds.iter().map(|&seed| Cell { mode, j: None, seed }));
                continue;
            }
            for &j in &self.j_values {
                cells.extend(self.seeds.iter().map(|&seed| Cell { mode, j: Some(j), seed }));
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub mode: HistoryMode,
    pub j: Option<usize>,
    pub seed: u64,
}

impl Cell {
    pub fn run_config(&self, base: &RunConfig) -> RunConfig {
        let mut config = base.clone();
        config.featurizer.history_mode = self.mode;
        config.model.use_hae = self.mode == HistoryMode::Hae;
        config.history_turns = self.j.unwrap_or(0);
        config.model.seed = self.seed;
        config.train.seed = self.seed;
        config
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub report: std::result::Result<EvalReport, String>,
}

/// Runs every cell in parallel; a failing cell records its error and the
/// rest still run. Results come back in `plan.cells()` order.
pub fn run_sweep(
    train_set: &[Dialog],
    dev_set: &[Dialog],
    tokenizer: &Tokenizer,
    base: &RunConfig,
    predict: &PredictConfig,
    plan: &SweepPlan,
) -> Result<Vec<CellResult>> {
    plan.validate()?;
    Ok(plan
        .cells()
        .into_par_iter()
        .map(|cell| {
            let config = cell.run_config(base);
            let report = train_and_evaluate(train_set, dev_set, tokenizer, &config, predict).map_err(|e| e.to_string());
            CellResult { cell, report }
        })
        .collect())
}

pub fn write_csv<W: Write>(out: W, results: &[CellResult]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "j", "seed", "f1", "heq_q", "heq_d", "error"])?;
    for r in results {
        let j = r.cell.j.map(|j| j.to_string()).unwrap_or_default();
        let (f1, heq_q, heq_d, error) = match &r.report {
            Ok(rep) => (
                format!("{:.4}", rep.f1),
                format!("{:.4}", rep.heq_q),
                format!("{:.4}", rep.heq_d),
                String::new(),
            ),
            Err(e) => (String::new(), String::new(), String::new(), e.clone()),
        };
        w.write_record([r.cell.mode.as_str(), &j, &r.cell.seed.to_string(), &f1, &heq_q, &heq_d, &error])?;
    }
    w.flush()?;
    Ok(())
}
