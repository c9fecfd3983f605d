//! History selection and training-instance construction.
//!
//! An instance for turn `k` is built by splitting the dialog history into
//! single-turn variations, letting a [`HistorySelector`] pick which of them to
//! keep, and merging the survivors back into one [`ConvQAInstance`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerSpan, Dialog, Passage};
use crate::error::{Error, Result};

/// Upper bound on history turns in QuAC (dialogs have at most 12 turns).
pub const DEFAULT_MAX_HISTORY: usize = 11;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub turn_index: usize,
    pub question: String,
    pub answer: AnswerSpan,
}

/// A copy of the turn-`k` instance carrying exactly one history turn.
#[derive(Debug, Clone, PartialEq)]
pub struct Variation<'a> {
    pub passage: &'a Passage,
    pub k: usize,
    pub question: &'a str,
    pub history: HistoryTurn,
    pub gold: &'a AnswerSpan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvQAInstance<'a> {
    pub dialog_id: &'a str,
    pub turn_index: usize,
    pub passage: &'a Passage,
    pub current_question: &'a str,
    /// Oldest first.
    pub selected_history: Vec<HistoryTurn>,
    pub gold: &'a AnswerSpan,
}

/// Chooses a subset of history turns for the current question.
pub trait HistorySelector {
    fn select(&self, variations: &[Variation<'_>]) -> Vec<HistoryTurn>;
}

/// Keeps the immediate `j` previous turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub j: usize,
    pub max_j: usize,
}

impl SelectorConfig {
    pub fn new(j: usize) -> Result<Self> {
        Self::with_bound(j, DEFAULT_MAX_HISTORY)
    }

    pub fn with_bound(j: usize, max_j: usize) -> Result<Self> {
        if j > max_j {
            return Err(Error::Config(format!(
                "history window j={j} exceeds the bound of {max_j}"
            )));
        }
        Ok(SelectorConfig { j, max_j })
    }
}

impl HistorySelector for SelectorConfig {
    fn select(&self, variations: &[Variation<'_>]) -> Vec<HistoryTurn> {
        select_history(variations, self)
    }
}

pub fn build_variations<'a>(dialog: &'a Dialog, k: usize) -> Result<Vec<Variation<'a>>> {
    if k == 0 || k > dialog.turns.len() {
        return Err(Error::TurnOutOfRange {
            k,
            turns: dialog.turns.len(),
        });
    }
    let current = &dialog.turns[k - 1];
    Ok(dialog.turns[..k - 1]
        .iter()
        .map(|t| Variation {
            passage: &dialog.passage,
            k,
            question: &current.question,
            history: HistoryTurn {
                turn_index: t.turn_index,
                question: t.question.clone(),
                answer: t.gold_answer.clone(),
            },
            gold: &current.gold_answer,
        })
        .collect())
}

/// The `min(j, k-1)` variations with the largest turn index, ascending.
pub fn select_history(variations: &[Variation<'_>], config: &SelectorConfig) -> Vec<HistoryTurn> {
    let mut turns: Vec<&HistoryTurn> = variations.iter().map(|v| &v.history).collect();
    turns.sort_by_key(|t| t.turn_index);
    let skip = turns.len().saturating_sub(config.j);
    turns.into_iter().skip(skip).cloned().collect()
}

pub fn merge<'a>(
    dialog_id: &'a str,
    turn_index: usize,
    passage: &'a Passage,
    current_question: &'a str,
    mut selected: Vec<HistoryTurn>,
    gold: &'a AnswerSpan,
) -> Result<ConvQAInstance<'a>> {
    let mut seen = BTreeSet::new();
    for t in &selected {
        if !seen.insert(t.turn_index) {
            return Err(Error::DuplicateHistoryTurn(t.turn_index));
        }
        if t.turn_index >= turn_index {
            return Err(Error::InvalidData(format!(
                "history turn {} is not before current turn {turn_index}",
                t.turn_index
            )));
        }
    }
    selected.sort_by_key(|t| t.turn_index);
    Ok(ConvQAInstance {
        dialog_id,
        turn_index,
        passage,
        current_question,
        selected_history: selected,
        gold,
    })
}

/// Builds the merged instance for turn `k`. When `answer_override` is given,
/// its entry `i - 1` replaces the gold answer of history turn `i` (used to feed
/// the model's own earlier predictions back in).
pub fn instance_for_turn<'a>(
    dialog: &'a Dialog,
    k: usize,
    selector: &dyn HistorySelector,
    answer_override: Option<&[AnswerSpan]>,
) -> Result<ConvQAInstance<'a>> {
    let mut variations = build_variations(dialog, k)?;
    if let Some(answers) = answer_override {
        for v in &mut variations {
            let i = v.history.turn_index;
            let replacement = answers.get(i - 1).ok_or_else(|| {
                Error::InvalidData(format!("no substitute answer for history turn {i}"))
            })?;
            v.history.answer = replacement.clone();
        }
    }
    let selected = selector.select(&variations);
    let turn = &dialog.turns[k - 1];
    merge(
        &dialog.dialog_id,
        k,
        &dialog.passage,
        &turn.question,
        selected,
        &turn.gold_answer,
    )
}

/// Every turn of every dialog as an instance under gold history.
pub fn all_instances<'a>(
    dialogs: &'a [Dialog],
    selector: &dyn HistorySelector,
) -> Result<Vec<ConvQAInstance<'a>>> {
    let mut out = Vec::new();
    for d in dialogs {
        for k in 1..=d.turns.len() {
            out.push(instance_for_turn(d, k, selector, None)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use proptest::prelude::*;

    pub(crate) fn dialog(n: usize) -> Dialog {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let mut offset = 0;
        let turns = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let span = AnswerSpan {
                    char_start: offset,
                    char_end: offset + w.len(),
                    text: w.clone(),
                };
                offset += w.len() + 1;
                Turn {
                    turn_index: i + 1,
                    question: format!("question {}", i + 1),
                    gold_answer: span.clone(),
                    human_f1: Some(1.0),
                    references: vec![span],
                }
            })
            .collect();
        Dialog {
            dialog_id: "d".into(),
            passage: Passage {
                id: "d".into(),
                title: String::new(),
                text,
                cannot_answer_appended: false,
            },
            turns,
        }
    }

    fn indices(turns: &[HistoryTurn]) -> Vec<usize> {
        turns.iter().map(|t| t.turn_index).collect()
    }

    #[test]
    fn variations_one_per_history_turn() {
        let d = dialog(3);
        let v = build_variations(&d, 3).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].history.turn_index, 1);
        assert_eq!(v[1].history.turn_index, 2);
        assert!(v.iter().all(|x| x.question == "question 3" && x.k == 3));

        assert!(build_variations(&d, 1).unwrap().is_empty());
        let v = build_variations(&d, 2).unwrap();
        assert_eq!(indices(&[v[0].history.clone()]), [1]);
    }

    #[test]
    fn variations_out_of_range() {
        let d = dialog(3);
        assert!(matches!(
            build_variations(&d, 0),
            Err(Error::TurnOutOfRange { .. })
        ));
        assert!(matches!(
            build_variations(&d, 4),
            Err(Error::TurnOutOfRange { k: 4, turns: 3 })
        ));
    }

    #[test]
    fn select_immediate_previous() {
        let d = dialog(6);
        let pick = |k, j| {
            let v = build_variations(&d, k).unwrap();
            indices(&select_history(&v, &SelectorConfig::new(j).unwrap()))
        };
        assert_eq!(pick(4, 2), [2, 3]);
        assert_eq!(pick(1, 11), Vec::<usize>::new());
        assert_eq!(pick(6, 5), [1, 2, 3, 4, 5]);
        assert_eq!(pick(6, 0), Vec::<usize>::new());
    }

    #[test]
    fn selector_bound() {
        assert!(SelectorConfig::new(12).is_err());
        assert!(SelectorConfig::with_bound(12, 20).is_ok());
    }

    #[test]
    fn merge_orders_and_rejects_duplicates() {
        let d = dialog(4);
        let v = build_variations(&d, 4).unwrap();
        let t2 = v[1].history.clone();
        let t3 = v[2].history.clone();
        let p = &d.passage;
        let gold = &d.turns[3].gold_answer;

        let inst = merge("d", 4, p, "q", vec![t2.clone(), t3.clone()], gold).unwrap();
        assert_eq!(indices(&inst.selected_history), [2, 3]);

        let inst = merge("d", 4, p, "q", vec![], gold).unwrap();
        assert!(inst.selected_history.is_empty());

        let inst = merge("d", 4, p, "q", vec![t3.clone(), t2.clone()], gold).unwrap();
        assert_eq!(indices(&inst.selected_history), [2, 3]);

        assert!(matches!(
            merge("d", 4, p, "q", vec![t2.clone(), t2], gold),
            Err(Error::DuplicateHistoryTurn(2))
        ));
    }

    #[test]
    fn override_replaces_history_answers() {
        let d = dialog(3);
        let fake = AnswerSpan {
            char_start: 6,
            char_end: 8,
            text: "w2".into(),
        };
        let overrides = vec![fake.clone(), fake.clone()];
        let sel = SelectorConfig::new(2).unwrap();
        let inst = instance_for_turn(&d, 3, &sel, Some(&overrides)).unwrap();
        assert!(inst.selected_history.iter().all(|t| t.answer == fake));
        let gold = instance_for_turn(&d, 3, &sel, None).unwrap();
        assert_eq!(gold.selected_history[0].answer, d.turns[0].gold_answer);
    }

    proptest! {
        #[test]
        fn selection_size_and_recency(n in 1usize..13, j in 0usize..12, k_raw in 0usize..12) {
            let d = dialog(n);
            let k = k_raw % n + 1;
            let sel = SelectorConfig::new(j).unwrap();
            let inst = instance_for_turn(&d, k, &sel, None).unwrap();
            let got = indices(&inst.selected_history);
            prop_assert_eq!(got.len(), j.min(k - 1));
            let expected: Vec<usize> = (k.saturating_sub(j).max(1)..k).collect();
            prop_assert_eq!(&got, &expected);
            if k > 1 && j > 0 {
                prop_assert_eq!(got.last().copied(), Some(k - 1));
            }
        }
    }
}
