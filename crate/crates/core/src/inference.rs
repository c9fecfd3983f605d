//! Decoding answers from span logits.
//!
//! Every window is searched exhaustively for valid `(s, e)` pairs; scores are
//! raw `start + end` logit sums compared across windows without per-window
//! renormalization.

use std::cmp::Ordering;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerSpan, Dialog, Passage};
use crate::error::{Error, Result};
use crate::featurizer::{encode_with_passage, EncodedWindow, FeaturizerConfig};
use crate::history::{instance_for_turn, SelectorConfig};
use crate::model::{predict_logits, ModelParams, Scalar};
use crate::tokenizer::Tokenizer;

/// Where turn `k` takes its history answers from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistorySource {
    /// The dataset's gold answers.
    #[default]
    Gold,
    /// The model's own predictions for earlier turns.
    Predicted,
}

impl FromStr for HistorySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(HistorySource::Gold),
            "predicted" => Ok(HistorySource::Predicted),
            other => Err(Error::Config(format!(
                "unknown history source {other:?} (expected gold or predicted)"
            ))),
        }
    }
}

impl fmt::Display for HistorySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HistorySource::Gold => "gold",
            HistorySource::Predicted => "predicted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictConfig {
    /// Longest answer in tokens.
    pub max_answer_len: usize,
    pub n_best: usize,
    pub history_source: HistorySource,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            max_answer_len: 30,
            n_best: 20,
            history_source: HistorySource::Gold,
        }
    }
}

impl PredictConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_answer_len == 0 || self.n_best == 0 {
            return Err(Error::Config("max_answer_len and n_best must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub dialog_id: String,
    pub turn_index: usize,
    pub text: String,
    pub char_span: (usize, usize),
    /// `start_logit + end_logit`.
    pub score: f64,
    pub window_id: usize,
    /// Sequence positions of the chosen start and end tokens.
    pub positions: (usize, usize),
}

impl SpanPrediction {
    pub fn answer_span(&self) -> AnswerSpan {
        AnswerSpan {
            char_start: self.char_span.0,
            char_end: self.char_span.1,
            text: self.text.clone(),
        }
    }
}

/// Logits for one window, widened to `f64`.
#[derive(Debug, Clone)]
pub struct WindowLogits<'a> {
    pub window: &'a EncodedWindow,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    window: usize,
    s: usize,
    e: usize,
}

impl Candidate {
    /// Best first: higher score, then earlier window, smaller s, smaller e.
    fn rank(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.window.cmp(&other.window))
            .then(self.s.cmp(&other.s))
            .then(self.e.cmp(&other.e))
    }
}

fn usable(window: &EncodedWindow, pos: usize) -> bool {
    window.segment_ids[pos] == 1 && window.attention_mask[pos] == 1
}

/// All valid `(s, e)` pairs of one window in scan order.
fn valid_pairs(window: &EncodedWindow, max_answer_len: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let range = window.passage_positions();
    let end = range.end;
    range.flat_map(move |s| {
        let last = (s + max_answer_len).min(end);
        (s..last)
            .filter(move |&e| usable(window, s) && usable(window, e))
            .map(move |e| (s, e))
    })
}

/// Top `config.n_best` valid spans over all windows, best first. Spans with
/// the same character range are reported once.
pub fn n_best_spans(
    windows: &[WindowLogits<'_>],
    passage: &Passage,
    config: &PredictConfig,
) -> Result<Vec<SpanPrediction>> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::InvalidData("best_span needs at least one window".into()));
    }
    // overlapping windows repeat spans, so rank everything before deduplicating
    let mut kept: Vec<Candidate> = windows
        .iter()
        .enumerate()
        .flat_map(|(w, logits)| {
            valid_pairs(logits.window, config.max_answer_len).map(move |(s, e)| Candidate {
                score: logits.start[s] + logits.end[e],
                window: w,
                s,
                e,
            })
        })
        .collect();
    kept.sort_unstable_by(Candidate::rank);
    if kept.is_empty() {
        return Err(Error::NoValidSpan);
    }

    let mut out: Vec<SpanPrediction> = Vec::new();
    for c in kept {
        let window = windows[c.window].window;
        let (cs, _) = window.char_span_at(c.s).expect("passage position");
        let (_, ce) = window.char_span_at(c.e).expect("passage position");
        if out.iter().any(|p| p.char_span == (cs, ce)) {
            continue;
        }
        let text = passage
            .slice(cs, ce)
            .ok_or_else(|| Error::InvalidData(format!("span {cs}..{ce} outside passage {}", passage.id)))?;
        out.push(SpanPrediction {
            dialog_id: window.dialog_id.clone(),
            turn_index: window.turn_index,
            text: text.to_string(),
            char_span: (cs, ce),
            score: c.score,
            window_id: window.window_index,
            positions: (c.s, c.e),
        });
        if out.len() == config.n_best {
            break;
        }
    }
    Ok(out)
}

/// Highest-scoring valid span across all windows.
pub fn best_span(windows: &[WindowLogits<'_>], passage: &Passage, config: &PredictConfig) -> Result<SpanPrediction> {
    let one = PredictConfig { n_best: 1, ..*config };
    Ok(n_best_spans(windows, passage, &one)?.remove(0))
}

fn window_logits<'a, F: Scalar>(window: &'a EncodedWindow, params: &ModelParams<F>) -> Result<WindowLogits<'a>> {
    let logits = predict_logits(window, params)?;
    Ok(WindowLogits {
        window,
        start: logits.start.iter().map(|x| x.widen()).collect(),
        end: logits.end.iter().map(|x| x.widen()).collect(),
    })
}

/// Answers turns `1..=n` in order. In predicted-history mode, turn `k` sees
/// this function's own answers for turns before `k`.
pub fn predict_dialog<F: Scalar>(
    dialog: &Dialog,
    params: &ModelParams<F>,
    tokenizer: &Tokenizer,
    featurizer: &FeaturizerConfig,
    history_turns: usize,
    config: &PredictConfig,
) -> Result<Vec<SpanPrediction>> {
    let selector = SelectorConfig::new(history_turns)?;
    let passage = tokenizer.tokenize(&dialog.passage.text);
    let mut predicted: Vec<AnswerSpan> = Vec::with_capacity(dialog.turns.len());
    let mut out = Vec::with_capacity(dialog.turns.len());
    for k in 1..=dialog.turns.len() {
        let answers = match config.history_source {
            HistorySource::Gold => None,
            HistorySource::Predicted => Some(predicted.as_slice()),
        };
        let instance = instance_for_turn(dialog, k, &selector, answers)?;
        let windows = encode_with_passage(&instance, &passage, tokenizer, featurizer)?;
        let logits = windows
            .iter()
            .map(|w| window_logits(w, params))
            .collect::<Result<Vec<_>>>()?;
        let best = best_span(&logits, &dialog.passage, config).map_err(|e| {
            Error::InvalidData(format!("dialog {} turn {k}: {e}", dialog.dialog_id))
        })?;
        predicted.push(best.answer_span());
        out.push(best);
    }
    Ok(out)
}

/// [`predict_dialog`] over a dataset; dialogs are processed in parallel and
/// returned in input order.
pub fn predict_dataset<F: Scalar>(
    dialogs: &[Dialog],
    params: &ModelParams<F>,
    tokenizer: &Tokenizer,
    featurizer: &FeaturizerConfig,
    history_turns: usize,
    config: &PredictConfig,
) -> Result<Vec<SpanPrediction>> {
    let per_dialog = dialogs
        .par_iter()
        .map(|d| predict_dialog(d, params, tokenizer, featurizer, history_turns, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_dialog.into_iter().flatten().collect())
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialog_id: String,
    pub turn_index: usize,
    pub answer_text: String,
    pub char_start: usize,
    pub char_end: usize,
    pub score: f64,
}

impl From<&SpanPrediction> for PredictionRecord {
    fn from(p: &SpanPrediction) -> Self {
        PredictionRecord {
            dialog_id: p.dialog_id.clone(),
            turn_index: p.turn_index,
            answer_text: p.text.clone(),
            char_start: p.char_span.0,
            char_end: p.char_span.1,
            score: p.score,
        }
    }
}

pub fn write_predictions<W: Write>(out: &mut W, predictions: &[SpanPrediction]) -> std::io::Result<()> {
    for p in predictions {
        let line = serde_json::to_string(&PredictionRecord::from(p)).expect("plain struct");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(input: R, origin: &str) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::parse(format!("{origin} line {}", i + 1), e))?;
        out.push(record);
    }
    Ok(out)
}
