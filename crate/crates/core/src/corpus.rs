//! Dialog data model and the JSON container it is loaded from.
//!
//! Character offsets everywhere in this crate are Unicode scalar value
//! indices, never byte offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// QuAC's sentinel for "the passage does not contain the answer".
pub const CANNOT_ANSWER: &str = "CANNOTANSWER";

/// Dialogs longer than this trigger a validation warning.
pub const MAX_QUAC_TURNS: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    pub cannot_answer_appended: bool,
}

impl Passage {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn slice(&self, char_start: usize, char_end: usize) -> Option<&str> {
        char_slice(&self.text, char_start, char_end)
    }

    /// Span covering the trailing `CANNOTANSWER` marker, if present.
    pub fn cannot_answer_span(&self) -> Option<AnswerSpan> {
        let suffix = format!(" {CANNOT_ANSWER}");
        if !self.text.ends_with(&suffix) {
            return None;
        }
        let end = self.char_len();
        let start = end - CANNOT_ANSWER.chars().count();
        Some(AnswerSpan {
            char_start: start,
            char_end: end,
            text: CANNOT_ANSWER.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub char_start: usize,
    /// Exclusive.
    pub char_end: usize,
    pub text: String,
}

impl AnswerSpan {
    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.char_start < end && start < self.char_end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_index: usize,
    pub question: String,
    pub gold_answer: AnswerSpan,
    pub human_f1: Option<f64>,
    /// All acceptable answers; the first entry is always `gold_answer`.
    pub references: Vec<AnswerSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialog {
    pub dialog_id: String,
    pub passage: Passage,
    pub turns: Vec<Turn>,
}

/// Returns the substring between two character indices.
pub fn char_slice(text: &str, char_start: usize, char_end: usize) -> Option<&str> {
    if char_start > char_end {
        return None;
    }
    let mut indices = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()));
    let start = indices.nth(char_start)?;
    let end = if char_end == char_start {
        start
    } else {
        indices.nth(char_end - char_start - 1)?
    };
    Some(&text[start..end])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceFormat {
    /// This crate's own container layout.
    #[default]
    Native,
    /// QuAC v0.2 field names (`paragraphs`, `context`, `qas`, `orig_answer`, `answers`).
    Quac,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub append_cannot_answer: bool,
    pub format: SourceFormat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileDataset {
    data: Vec<FileDialog>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileDialog {
    id: String,
    #[serde(default)]
    title: String,
    passage: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    cannot_answer_appended: bool,
    turns: Vec<FileTurn>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileTurn {
    turn_index: usize,
    question: String,
    answer: FileSpan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    human_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    references: Option<Vec<FileSpan>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileSpan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    char_start: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    char_end: Option<i64>,
    text: String,
}

impl From<&AnswerSpan> for FileSpan {
    fn from(span: &AnswerSpan) -> Self {
        FileSpan {
            char_start: Some(span.char_start as i64),
            char_end: Some(span.char_end as i64),
            text: span.text.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct QuacFile {
    data: Vec<QuacArticle>,
}

#[derive(Debug, Deserialize)]
struct QuacArticle {
    #[serde(default)]
    title: String,
    #[serde(default)]
    section_title: Option<String>,
    paragraphs: Vec<QuacParagraph>,
}

#[derive(Debug, Deserialize)]
struct QuacParagraph {
    id: String,
    context: String,
    qas: Vec<QuacQa>,
}

#[derive(Debug, Deserialize)]
struct QuacQa {
    question: String,
    #[serde(default)]
    answers: Vec<QuacAnswer>,
    orig_answer: QuacAnswer,
}

#[derive(Debug, Deserialize)]
struct QuacAnswer {
    text: String,
    answer_start: i64,
}

impl QuacAnswer {
    fn to_file_span(&self) -> FileSpan {
        let len = self.text.chars().count() as i64;
        FileSpan {
            char_start: Some(self.answer_start),
            char_end: Some(self.answer_start + len),
            text: self.text.clone(),
        }
    }
}

fn quac_to_file(quac: QuacFile) -> FileDataset {
    let data = quac
        .data
        .into_iter()
        .flat_map(|article| {
            let title = match &article.section_title {
                Some(section) if !section.is_empty() => format!("{}: {}", article.title, section),
                _ => article.title.clone(),
            };
            article.paragraphs.into_iter().map(move |p| {
                let appended = p.context.ends_with(&format!(" {CANNOT_ANSWER}"));
                let turns = p
                    .qas
                    .into_iter()
                    .enumerate()
                    .map(|(i, qa)| {
                        let gold = qa.orig_answer.to_file_span();
                        let mut refs = vec![gold.clone()];
                        refs.extend(qa.answers.iter().map(QuacAnswer::to_file_span));
                        FileTurn {
                            turn_index: i + 1,
                            question: qa.question,
                            answer: gold,
                            human_f1: None,
                            references: Some(refs),
                        }
                    })
                    .collect();
                FileDialog {
                    id: p.id,
                    title: title.clone(),
                    passage: p.context,
                    cannot_answer_appended: appended,
                    turns,
                }
            })
        })
        .collect();
    FileDataset { data }
}

pub fn load_dataset(path: impl AsRef<Path>, options: LoadOptions) -> Result<Vec<Dialog>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&raw, &path.display().to_string(), options)
}

/// Parses a dataset from an in-memory JSON string. `origin` is only used in
/// error messages.
pub fn parse_dataset(raw: &str, origin: &str, options: LoadOptions) -> Result<Vec<Dialog>> {
    let file: FileDataset = match options.format {
        SourceFormat::Native => serde_json::from_str(raw).map_err(|e| Error::parse(origin, e))?,
        SourceFormat::Quac => {
            let quac: QuacFile = serde_json::from_str(raw).map_err(|e| Error::parse(origin, e))?;
            quac_to_file(quac)
        }
    };
    file.data
        .into_iter()
        .map(|d| convert_dialog(d, options.append_cannot_answer))
        .collect()
}

fn convert_dialog(file: FileDialog, append_cannot_answer: bool) -> Result<Dialog> {
    if file.passage.is_empty() {
        return Err(Error::InvalidData(format!(
            "dialog {} has an empty passage",
            file.id
        )));
    }
    let suffix = format!(" {CANNOT_ANSWER}");
    let mut text = file.passage;
    let mut appended = file.cannot_answer_appended;
    if append_cannot_answer && !text.ends_with(&suffix) {
        text.push_str(&suffix);
        appended = true;
    }
    if appended && !text.ends_with(&suffix) {
        return Err(Error::InvalidData(format!(
            "dialog {} is flagged cannot_answer_appended but does not end with {suffix:?}",
            file.id
        )));
    }
    let passage = Passage {
        id: file.id.clone(),
        title: file.title,
        text,
        cannot_answer_appended: appended,
    };

    let mut turns = Vec::with_capacity(file.turns.len());
    for (pos, t) in file.turns.into_iter().enumerate() {
        if t.turn_index != pos + 1 {
            return Err(Error::InvalidData(format!(
                "dialog {}: turn_index {} at position {} (expected {})",
                file.id,
                t.turn_index,
                pos,
                pos + 1
            )));
        }
        if t.question.trim().is_empty() {
            return Err(Error::InvalidData(format!(
                "dialog {} turn {}: empty question",
                file.id, t.turn_index
            )));
        }
        if let Some(h) = t.human_f1 {
            if !(0.0..=1.0).contains(&h) {
                return Err(Error::InvalidData(format!(
                    "dialog {} turn {}: human_f1 {h} outside [0, 1]",
                    file.id, t.turn_index
                )));
            }
        }
        let gold = resolve_span(&passage, &file.id, t.turn_index, &t.answer)?;
        let mut references = vec![gold.clone()];
        if let Some(refs) = &t.references {
            let resolved = refs
                .iter()
                .map(|r| resolve_span(&passage, &file.id, t.turn_index, r))
                .collect::<Result<Vec<_>>>()?;
            let skip = usize::from(resolved.first() == Some(&gold));
            references.extend(resolved.into_iter().skip(skip));
        }
        turns.push(Turn {
            turn_index: t.turn_index,
            question: t.question,
            gold_answer: gold,
            human_f1: t.human_f1,
            references,
        });
    }
    Ok(Dialog {
        dialog_id: file.id,
        passage,
        turns,
    })
}

fn resolve_span(
    passage: &Passage,
    dialog_id: &str,
    turn_index: usize,
    span: &FileSpan,
) -> Result<AnswerSpan> {
    let offsets = match (span.char_start, span.char_end) {
        (Some(s), Some(e)) if s >= 0 && e >= 0 => Some((s as usize, e as usize)),
        _ => None,
    };
    let Some((start, end)) = offsets else {
        if span.text == CANNOT_ANSWER {
            return passage.cannot_answer_span().ok_or_else(|| {
                Error::InvalidData(format!(
                    "dialog {dialog_id} turn {turn_index}: unanswerable span but passage has no {CANNOT_ANSWER} suffix"
                ))
            });
        }
        return Err(Error::InvalidData(format!(
            "dialog {dialog_id} turn {turn_index}: answer span without offsets"
        )));
    };
    if start >= end {
        return Err(Error::InvalidData(format!(
            "dialog {dialog_id} turn {turn_index}: empty or reversed span ({start}, {end})"
        )));
    }
    match passage.slice(start, end) {
        Some(slice) if slice == span.text => Ok(AnswerSpan {
            char_start: start,
            char_end: end,
            text: span.text.clone(),
        }),
        found => Err(Error::SpanMismatch {
            dialog_id: dialog_id.to_string(),
            turn_index,
            expected: span.text.clone(),
            found: found.unwrap_or("<out of bounds>").to_string(),
        }),
    }
}

/// Serializes dialogs into the native container format.
pub fn dataset_to_json(dialogs: &[Dialog]) -> String {
    let file = FileDataset {
        data: dialogs
            .iter()
            .map(|d| FileDialog {
                id: d.dialog_id.clone(),
                title: d.passage.title.clone(),
                passage: d.passage.text.clone(),
                cannot_answer_appended: d.passage.cannot_answer_appended,
                turns: d
                    .turns
                    .iter()
                    .map(|t| FileTurn {
                        turn_index: t.turn_index,
                        question: t.question.clone(),
                        answer: FileSpan::from(&t.gold_answer),
                        human_f1: t.human_f1,
                        references: (t.references.len() > 1)
                            .then(|| t.references.iter().map(FileSpan::from).collect()),
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("dataset serialization cannot fail")
}

pub fn save_dataset(path: impl AsRef<Path>, dialogs: &[Dialog]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_json(dialogs)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub dialogs: usize,
    pub turns: usize,
    pub errors: usize,
    pub warnings: usize,
    pub messages: Vec<String>,
}

pub fn validate_dataset(dialogs: &[Dialog]) -> ValidationReport {
    let mut report = ValidationReport {
        dialogs: dialogs.len(),
        ..Default::default()
    };
    for d in dialogs {
        report.turns += d.turns.len();
        if d.passage.text.is_empty() {
            report.errors += 1;
            report.messages.push(format!("{}: empty passage", d.dialog_id));
        }
        if d.turns.len() > MAX_QUAC_TURNS {
            report.warnings += 1;
            report.messages.push(format!(
                "{}: {} turns exceeds the QuAC bound of {MAX_QUAC_TURNS}",
                d.dialog_id,
                d.turns.len()
            ));
        }
        for (pos, t) in d.turns.iter().enumerate() {
            let mut problems = Vec::new();
            if t.turn_index != pos + 1 {
                problems.push(format!("turn_index {} at position {pos}", t.turn_index));
            }
            if t.question.trim().is_empty() {
                problems.push("empty question".to_string());
            }
            if t.references.first() != Some(&t.gold_answer) {
                problems.push("gold answer is not the first reference".to_string());
            }
            for span in &t.references {
                let ok = span.char_start < span.char_end
                    && d.passage.slice(span.char_start, span.char_end) == Some(span.text.as_str());
                if !ok {
                    problems.push(format!(
                        "span ({}, {}) does not match {:?}",
                        span.char_start, span.char_end, span.text
                    ));
                }
            }
            if !problems.is_empty() {
                report.errors += 1;
                report.messages.push(format!(
                    "{} turn {}: {}",
                    d.dialog_id,
                    t.turn_index,
                    problems.join("; ")
                ));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_dialog(answer_text: &str) -> String {
        dialog_at(22, 27, answer_text)
    }

    fn dialog_at(start: usize, end: usize, answer_text: &str) -> String {
        format!(
            r#"{{"data": [{{"id": "d1", "title": "Augusto Pinochet", "passage": "Pinochet was publicly known as a man",
                "turns": [{{"turn_index": 1, "question": "Was he known for being intelligent",
                "answer": {{"char_start": {start}, "char_end": {end}, "text": "{answer_text}"}}, "human_f1": 1.0}}]}}]}}"#
        )
    }

    #[test]
    fn loads_single_dialog() {
        let dialogs = parse_dataset(&one_dialog("known"), "test", LoadOptions::default()).unwrap();
        assert_eq!(dialogs.len(), 1);
        let d = &dialogs[0];
        assert_eq!(d.turns.len(), 1);
        assert_eq!(d.turns[0].gold_answer.text, "known");
        assert_eq!(d.turns[0].references, vec![d.turns[0].gold_answer.clone()]);
        assert_eq!(validate_dataset(&dialogs).errors, 0);
    }

    #[test]
    fn case_mismatch_is_span_error() {
        let err = parse_dataset(&one_dialog("Known"), "test", LoadOptions::default()).unwrap_err();
        match err {
            Error::SpanMismatch {
                dialog_id,
                turn_index,
                ..
            } => {
                assert_eq!(dialog_id, "d1");
                assert_eq!(turn_index, 1);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn offsets_are_exclusive_char_indices() {
        // "known" starts after "Pinochet was publicly " (22 chars)
        let err = parse_dataset(&dialog_at(21, 26, "known"), "test", LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SpanMismatch { .. }));
    }

    #[test]
    fn empty_dataset() {
        let dialogs = parse_dataset(r#"{"data": []}"#, "test", LoadOptions::default()).unwrap();
        assert!(dialogs.is_empty());
        assert_eq!(validate_dataset(&dialogs), ValidationReport::default());
    }

    #[test]
    fn parse_error_has_position() {
        let err = parse_dataset("{\"data\": [\n{\"id\": 3}]}", "bad.json", LoadOptions::default())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.json") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn multibyte_offsets_are_char_indices() {
        let raw = r#"{"data": [{"id": "u", "passage": "café au lait über alles",
            "turns": [{"turn_index": 1, "question": "what?", "answer": {"char_start": 13, "char_end": 17, "text": "über"}}]}]}"#;
        let d = parse_dataset(raw, "t", LoadOptions::default()).unwrap();
        assert_eq!(d[0].turns[0].gold_answer.text, "über");
    }

    #[test]
    fn appends_cannot_answer() {
        let raw = r#"{"data": [{"id": "x", "passage": "some text",
            "turns": [{"turn_index": 1, "question": "what?", "answer": {"text": "CANNOTANSWER"}}]}]}"#;
        let opts = LoadOptions {
            append_cannot_answer: true,
            ..Default::default()
        };
        let d = parse_dataset(raw, "t", opts).unwrap();
        assert_eq!(d[0].passage.text, "some text CANNOTANSWER");
        assert!(d[0].passage.cannot_answer_appended);
        let gold = &d[0].turns[0].gold_answer;
        assert_eq!((gold.char_start, gold.char_end), (10, 22));
        assert_eq!(d[0].passage.slice(10, 22), Some(CANNOT_ANSWER));
        // without the flag the unanswerable span has nowhere to point
        assert!(parse_dataset(raw, "t", LoadOptions::default()).is_err());
    }

    #[test]
    fn quac_field_names() {
        let raw = r#"{"data": [{"title": "Augusto Pinochet", "section_title": "Intellectual life",
            "paragraphs": [{"id": "C_1", "context": "No, Pinochet was publicly known. CANNOTANSWER",
            "qas": [{"question": "Was he known for being intelligent", "id": "q1",
                     "orig_answer": {"text": "No", "answer_start": 0},
                     "answers": [{"text": "No, Pinochet", "answer_start": 0}]},
                    {"question": "Why?", "id": "q2",
                     "orig_answer": {"text": "CANNOTANSWER", "answer_start": 33},
                     "answers": [{"text": "CANNOTANSWER", "answer_start": 33}]}]}]}]}"#;
        let opts = LoadOptions {
            append_cannot_answer: true,
            format: SourceFormat::Quac,
        };
        let d = parse_dataset(raw, "t", opts).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].dialog_id, "C_1");
        assert_eq!(d[0].passage.title, "Augusto Pinochet: Intellectual life");
        assert!(d[0].passage.text.ends_with(" CANNOTANSWER"));
        assert!(!d[0].passage.text.ends_with("CANNOTANSWER CANNOTANSWER"));
        assert_eq!(d[0].turns[0].references.len(), 2);
        assert_eq!(d[0].turns[1].gold_answer.text, CANNOT_ANSWER);
        assert_eq!(d[0].turns[1].turn_index, 2);
    }

    #[test]
    fn non_consecutive_turns_rejected() {
        let raw = r#"{"data": [{"id": "x", "passage": "ab",
            "turns": [{"turn_index": 2, "question": "q", "answer": {"char_start": 0, "char_end": 1, "text": "a"}}]}]}"#;
        assert!(matches!(
            parse_dataset(raw, "t", LoadOptions::default()),
            Err(Error::InvalidData(_))
        ));
    }

    fn dialog_with_turns(id: &str, n: usize) -> Dialog {
        let passage = Passage {
            id: id.into(),
            title: String::new(),
            text: "alpha beta".into(),
            cannot_answer_appended: false,
        };
        let span = AnswerSpan {
            char_start: 0,
            char_end: 5,
            text: "alpha".into(),
        };
        Dialog {
            dialog_id: id.into(),
            passage,
            turns: (1..=n)
                .map(|k| Turn {
                    turn_index: k,
                    question: format!("q{k}"),
                    gold_answer: span.clone(),
                    human_f1: None,
                    references: vec![span.clone()],
                })
                .collect(),
        }
    }

    #[test]
    fn validation_counts() {
        let report = validate_dataset(&[dialog_with_turns("a", 3), dialog_with_turns("b", 4)]);
        assert_eq!((report.dialogs, report.turns, report.errors), (2, 7, 0));
        assert_eq!(report.warnings, 0);

        let report = validate_dataset(&[dialog_with_turns("long", 13)]);
        assert_eq!(report.warnings, 1);
        assert_eq!(report.errors, 0);

        let mut bad = dialog_with_turns("bad", 2);
        bad.turns[1].gold_answer.text = "Alpha".into();
        bad.turns[1].references[0].text = "Alpha".into();
        assert_eq!(validate_dataset(&[bad]).errors, 1);
    }

    #[test]
    fn char_slice_bounds() {
        assert_eq!(char_slice("héllo", 1, 3), Some("él"));
        assert_eq!(char_slice("héllo", 5, 5), Some(""));
        assert_eq!(char_slice("héllo", 0, 6), None);
        assert_eq!(char_slice("héllo", 3, 2), None);
    }
}
