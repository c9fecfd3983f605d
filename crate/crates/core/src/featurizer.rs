//! Packs a [`ConvQAInstance`] into fixed-length model inputs.
//!
//! Each window is `[CLS] question [SEP] passage-slice [SEP]` padded to
//! `max_seq_len`. Long passages are split into overlapping slices that start
//! every `doc_stride` passage tokens.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::ConvQAInstance;
use crate::tokenizer::{CharSpan, TokenizedText, Tokenizer};

/// Written in place of a label when the gold span does not fit the window.
pub const SENTINEL_DROPPED: i64 = -1;

pub const HAE_NONE: u8 = 0;
pub const HAE_HISTORY: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryMode {
    /// Current question only.
    None,
    /// Mark passage tokens inside history answers with the history embedding.
    Hae,
    /// Prepend history questions and answers to the question.
    Phqa,
    /// Prepend history answers only.
    Pha,
}

impl HistoryMode {
    pub const ALL: [HistoryMode; 4] = [
        HistoryMode::None,
        HistoryMode::Hae,
        HistoryMode::Phqa,
        HistoryMode::Pha,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HistoryMode::None => "none",
            HistoryMode::Hae => "hae",
            HistoryMode::Phqa => "phqa",
            HistoryMode::Pha => "pha",
        }
    }

    pub fn uses_history(self) -> bool {
        self != HistoryMode::None
    }
}

impl fmt::Display for HistoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HistoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(HistoryMode::None),
            "hae" => Ok(HistoryMode::Hae),
            "phqa" => Ok(HistoryMode::Phqa),
            "pha" => Ok(HistoryMode::Pha),
            other => Err(Error::Config(format!(
                "unknown history mode {other:?} (expected none, hae, phqa or pha)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub max_seq_len: usize,
    pub doc_stride: usize,
    pub max_question_len: usize,
    pub history_mode: HistoryMode,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            max_seq_len: 384,
            doc_stride: 128,
            max_question_len: 64,
            history_mode: HistoryMode::Hae,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_question_len == 0 || self.max_question_len + 3 >= self.max_seq_len {
            return Err(Error::Config(format!(
                "max_question_len ({}) + 3 must be below max_seq_len ({})",
                self.max_question_len, self.max_seq_len
            )));
        }
        let min_capacity = self.max_seq_len - self.max_question_len - 3;
        if self.doc_stride == 0 || self.doc_stride >= min_capacity {
            return Err(Error::Config(format!(
                "doc_stride ({}) must be in 1..{min_capacity} (passage slots left by a full-length question)",
                self.doc_stride
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EncodedWindow {
    pub dialog_id: String,
    pub turn_index: usize,
    pub window_index: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    pub hae_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Sequence positions of the gold start/end, or `None` when the gold span
    /// is not fully inside this window.
    pub labels: Option<(usize, usize)>,
    /// Index (into the passage token list) of this window's first passage token.
    pub passage_token_offset: usize,
    /// Sequence position of the first passage token.
    pub passage_seq_start: usize,
    /// Character span of each passage token in the window, in sequence order.
    pub char_spans: Vec<CharSpan>,
}

impl EncodedWindow {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn passage_len(&self) -> usize {
        self.char_spans.len()
    }

    /// Sequence positions holding passage tokens.
    pub fn passage_positions(&self) -> std::ops::Range<usize> {
        self.passage_seq_start..self.passage_seq_start + self.passage_len()
    }

    /// Character span of the passage token at sequence position `pos`.
    pub fn char_span_at(&self, pos: usize) -> Option<CharSpan> {
        pos.checked_sub(self.passage_seq_start)
            .and_then(|i| self.char_spans.get(i).copied())
    }

    pub fn start_label(&self) -> i64 {
        self.labels.map_or(SENTINEL_DROPPED, |(s, _)| s as i64)
    }

    pub fn end_label(&self) -> i64 {
        self.labels.map_or(SENTINEL_DROPPED, |(_, e)| e as i64)
    }
}

#[derive(Serialize)]
struct WindowDump<'a> {
    dialog_id: &'a str,
    turn_index: usize,
    window_index: usize,
    token_ids: &'a [usize],
    segment_ids: &'a [u8],
    hae_ids: &'a [u8],
    attention_mask: &'a [u8],
    start_label: i64,
    end_label: i64,
    window_passage_offset: usize,
    passage_seq_start: usize,
    char_spans: &'a [CharSpan],
}

/// Writes one JSON object per window, one per line.
pub fn dump_windows<W: Write>(out: &mut W, windows: &[EncodedWindow]) -> std::io::Result<()> {
    for w in windows {
        let dump = WindowDump {
            dialog_id: &w.dialog_id,
            turn_index: w.turn_index,
            window_index: w.window_index,
            token_ids: &w.token_ids,
            segment_ids: &w.segment_ids,
            hae_ids: &w.hae_ids,
            attention_mask: &w.attention_mask,
            start_label: w.start_label(),
            end_label: w.end_label(),
            window_passage_offset: w.passage_token_offset,
            passage_seq_start: w.passage_seq_start,
            char_spans: &w.char_spans,
        };
        serde_json::to_writer(&mut *out, &dump)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionTokens {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

/// Question side of the packed sequence. Prepended history is concatenated
/// oldest first with no separators, then truncated from the left so the
/// current question survives.
pub fn build_question_tokens(
    instance: &ConvQAInstance<'_>,
    tokenizer: &Tokenizer,
    config: &FeaturizerConfig,
) -> QuestionTokens {
    let mut pieces: Vec<&str> = Vec::new();
    for turn in &instance.selected_history {
        match config.history_mode {
            HistoryMode::Phqa => {
                pieces.push(&turn.question);
                pieces.push(&turn.answer.text);
            }
            HistoryMode::Pha => pieces.push(&turn.answer.text),
            HistoryMode::None | HistoryMode::Hae => {}
        }
    }
    pieces.push(instance.current_question);

    let mut out = QuestionTokens {
        tokens: Vec::new(),
        ids: Vec::new(),
    };
    for piece in pieces {
        let t = tokenizer.tokenize(piece);
        out.tokens.extend(t.tokens);
        out.ids.extend(t.ids);
    }
    let excess = out.tokens.len().saturating_sub(config.max_question_len);
    out.tokens.drain(..excess);
    out.ids.drain(..excess);
    out
}

/// Window start offsets into a passage of `passage_len` tokens.
pub fn window_starts(passage_len: usize, capacity: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    if passage_len == 0 || capacity == 0 || stride == 0 {
        return starts;
    }
    let mut start = 0;
    loop {
        starts.push(start);
        if start + capacity >= passage_len {
            break;
        }
        start += stride;
    }
    starts
}

/// Token range `[first, last]` of the passage tokens overlapping a char span.
fn token_range(passage: &TokenizedText, char_start: usize, char_end: usize) -> Option<(usize, usize)> {
    let mut hits = passage
        .char_spans
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s < char_end && char_start < e)
        .map(|(i, _)| i);
    let first = hits.next()?;
    let last = hits.last().unwrap_or(first);
    Some((first, last))
}

pub fn encode(
    instance: &ConvQAInstance<'_>,
    tokenizer: &Tokenizer,
    config: &FeaturizerConfig,
) -> Result<Vec<EncodedWindow>> {
    let passage = tokenizer.tokenize(&instance.passage.text);
    encode_with_passage(instance, &passage, tokenizer, config)
}

/// Same as [`encode`] with the passage already tokenized, so callers can
/// tokenize a dialog's passage once for all of its turns.
pub fn encode_with_passage(
    instance: &ConvQAInstance<'_>,
    passage: &TokenizedText,
    tokenizer: &Tokenizer,
    config: &FeaturizerConfig,
) -> Result<Vec<EncodedWindow>> {
    config.validate()?;
    if passage.is_empty() {
        return Err(Error::EmptyPassage);
    }
    let vocab = tokenizer.vocab();
    let question = build_question_tokens(instance, tokenizer, config);
    let q_len = question.ids.len();
    let capacity = config.max_seq_len - q_len - 3;
    let seq_start = q_len + 2;

    let gold = token_range(passage, instance.gold.char_start, instance.gold.char_end);
    let hae_marked: Vec<bool> = if config.history_mode == HistoryMode::Hae {
        passage
            .char_spans
            .iter()
            .map(|&(s, e)| {
                instance
                    .selected_history
                    .iter()
                    .any(|t| t.answer.overlaps(s, e))
            })
            .collect()
    } else {
        vec![false; passage.len()]
    };

    let starts = window_starts(passage.len(), capacity, config.doc_stride);
    let mut windows = Vec::with_capacity(starts.len());
    for (window_index, &offset) in starts.iter().enumerate() {
        let len = capacity.min(passage.len() - offset);
        let n = config.max_seq_len;
        let mut token_ids = vec![vocab.pad_id; n];
        let mut segment_ids = vec![0u8; n];
        let mut hae_ids = vec![HAE_NONE; n];
        let mut attention_mask = vec![0u8; n];

        token_ids[0] = vocab.cls_id;
        token_ids[1..=q_len].copy_from_slice(&question.ids);
        token_ids[q_len + 1] = vocab.sep_id;
        for i in 0..len {
            let pos = seq_start + i;
            token_ids[pos] = passage.ids[offset + i];
            segment_ids[pos] = 1;
            if hae_marked[offset + i] {
                hae_ids[pos] = HAE_HISTORY;
            }
        }
        let last = seq_start + len;
        token_ids[last] = vocab.sep_id;
        segment_ids[last] = 1;
        attention_mask[..=last].fill(1);

        let labels = gold.and_then(|(s, e)| {
            (s >= offset && e < offset + len)
                .then(|| (s - offset + seq_start, e - offset + seq_start))
        });

        windows.push(EncodedWindow {
            dialog_id: instance.dialog_id.to_string(),
            turn_index: instance.turn_index,
            window_index,
            token_ids,
            segment_ids,
            hae_ids,
            attention_mask,
            labels,
            passage_token_offset: offset,
            passage_seq_start: seq_start,
            char_spans: passage.char_spans[offset..offset + len].to_vec(),
        });
    }
    Ok(windows)
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub windows: Vec<&'a EncodedWindow>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Chunks windows into batches, optionally after a seeded shuffle. The final
/// partial batch is kept.
pub fn batch(windows: &[EncodedWindow], batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch<'_>> {
    let mut order: Vec<&EncodedWindow> = windows.iter().collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|c| Batch { windows: c.to_vec() })
        .collect()
}
