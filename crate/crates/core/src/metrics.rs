//! QuAC-style scoring: word-level F1 with SQuAD answer normalization, and
//! the human equivalence scores HEQ-Q and HEQ-D.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{load_dataset, Dialog, LoadOptions};
use crate::error::{Error, Result};
use crate::inference::{read_predictions, PredictionRecord};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, removes ASCII punctuation, drops articles and splits on
/// whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .map(str::to_string)
        .collect()
}

/// Bag-of-words F1 between two answers.
pub fn token_f1(pred: &str, reference: &str) -> f64 {
    let p = normalize_answer(pred);
    let r = normalize_answer(reference);
    if p.is_empty() || r.is_empty() {
        return if p.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &r {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub dialog_id: String,
    pub turn_index: usize,
    pub prediction: String,
    pub references: Vec<String>,
    pub human_f1: Option<f64>,
}

/// Maximum F1 over the references.
pub fn question_f1(example: &EvalExample) -> f64 {
    example
        .references
        .iter()
        .map(|r| token_f1(&example.prediction, r))
        .fold(0.0, f64::max)
}

fn missing_human_f1<'a>(examples: impl Iterator<Item = &'a EvalExample>) -> Result<()> {
    let missing: Vec<String> = examples
        .filter(|e| e.human_f1.is_none())
        .map(|e| format!("{}#{}", e.dialog_id, e.turn_index))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingHumanF1(missing.join(", ")))
    }
}

/// `(HEQ-Q, HEQ-D)` in percent. A question passes when its system F1 is at
/// least the human F1; a dialog passes when all of its questions do.
pub fn heq(examples: &[EvalExample]) -> Result<(f64, f64)> {
    missing_human_f1(examples.iter())?;
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut dialogs: BTreeMap<&str, bool> = BTreeMap::new();
    let mut passed = 0usize;
    for e in examples {
        let ok = question_f1(e) >= e.human_f1.expect("checked");
        passed += ok as usize;
        let entry = dialogs.entry(&e.dialog_id).or_insert(true);
        *entry &= ok;
    }
    let heq_q = 100.0 * passed as f64 / examples.len() as f64;
    let heq_d = 100.0 * dialogs.values().filter(|&&ok| ok).count() as f64 / dialogs.len() as f64;
    Ok((heq_q, heq_d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub heq_q: f64,
    pub heq_d: f64,
    pub n_questions: usize,
    pub n_dialogs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    /// Skip questions whose human F1 is below this value (QuAC uses 0.4).
    pub min_human_f1: Option<f64>,
    /// Score against the first reference only instead of the best one.
    pub first_reference_only: bool,
}

pub fn evaluate_examples(examples: &[EvalExample], options: &EvalOptions) -> Result<EvalReport> {
    let mut kept: Vec<EvalExample> = Vec::with_capacity(examples.len());
    for e in examples {
        if e.references.is_empty() {
            return Err(Error::InvalidData(format!(
                "dialog {} turn {} has no reference answer",
                e.dialog_id, e.turn_index
            )));
        }
        if let Some(min) = options.min_human_f1 {
            match e.human_f1 {
                Some(h) if h < min => continue,
                None => missing_human_f1(std::iter::once(e))?,
                _ => {}
            }
        }
        let mut e = e.clone();
        if options.first_reference_only {
            e.references.truncate(1);
        }
        kept.push(e);
    }
    let n = kept.len();
    let f1 = if n == 0 {
        0.0
    } else {
        100.0 * kept.iter().map(question_f1).sum::<f64>() / n as f64
    };
    let (heq_q, heq_d) = heq(&kept)?;
    let n_dialogs = kept
        .iter()
        .map(|e| e.dialog_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    Ok(EvalReport {
        f1,
        heq_q,
        heq_d,
        n_questions: n,
        n_dialogs,
    })
}

/// Pairs every dataset turn with its prediction. Each turn needs exactly one.
pub fn pair_predictions(dialogs: &[Dialog], predictions: &[PredictionRecord]) -> Result<Vec<EvalExample>> {
    let mut by_key: HashMap<(&str, usize), &PredictionRecord> = HashMap::new();
    for p in predictions {
        if by_key.insert((p.dialog_id.as_str(), p.turn_index), p).is_some() {
            return Err(Error::Predictions(format!(
                "duplicate prediction for dialog {} turn {}",
                p.dialog_id, p.turn_index
            )));
        }
    }
    let mut out = Vec::new();
    for d in dialogs {
        for t in &d.turns {
            let p = by_key.remove(&(d.dialog_id.as_str(), t.turn_index)).ok_or_else(|| {
                Error::Predictions(format!(
                    "missing prediction for dialog {} turn {}",
                    d.dialog_id, t.turn_index
                ))
            })?;
            out.push(EvalExample {
                dialog_id: d.dialog_id.clone(),
                turn_index: t.turn_index,
                prediction: p.answer_text.clone(),
                references: t.references.iter().map(|r| r.text.clone()).collect(),
                human_f1: t.human_f1,
            });
        }
    }
    if let Some(((id, k), _)) = by_key.into_iter().min_by(|a, b| a.0.cmp(&b.0)) {
        return Err(Error::Predictions(format!(
            "prediction for dialog {id} turn {k} has no matching turn in the dataset"
        )));
    }
    Ok(out)
}

pub fn evaluate_predictions(
    dialogs: &[Dialog],
    predictions: &[PredictionRecord],
    options: &EvalOptions,
) -> Result<EvalReport> {
    evaluate_examples(&pair_predictions(dialogs, predictions)?, options)
}

pub fn evaluate_files(
    predictions_path: impl AsRef<Path>,
    dataset_path: impl AsRef<Path>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let path = predictions_path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let predictions = read_predictions(BufReader::new(file), &path.display().to_string())?;
    let dialogs = load_dataset(dataset_path, LoadOptions::default())?;
    evaluate_predictions(&dialogs, &predictions, options)
}
