//! Synthetic coreference dialogs.
//!
//! A passage is random filler (`w0`, `w1`, ...) with one marker word
//! (`m0`...`m11`) per turn. A self-contained turn asks "what follows mX ?"
//! and its answer is the `answer_len` tokens after that marker. A
//! coreference turn asks "what comes after that ?" and its answer is the
//! segment directly after the previous turn's answer, so it can only be
//! located through the dialog history. The marker of a coreference turn is
//! still placed in the passage, as a distractor, so marker counts carry no
//! signal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerSpan, Dialog, Passage, Turn, MAX_QUAC_TURNS};
use crate::error::{Error, Result};

pub const ANAPHOR_QUESTION: &str = "what comes after that ?";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_dialogs: usize,
    pub turns_per_dialog: usize,
    pub passage_len_tokens: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub seed: u64,
    pub coreference_rate: f64,
    /// Tokens per answer.
    pub answer_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dialogs: 200,
            turns_per_dialog: 4,
            passage_len_tokens: 40,
            vocab_size: 50,
            seed: 0,
            coreference_rate: 1.0,
            answer_len: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_dialogs", self.n_dialogs),
            ("turns_per_dialog", self.turns_per_dialog),
            ("passage_len_tokens", self.passage_len_tokens),
            ("vocab_size", self.vocab_size),
            ("answer_len", self.answer_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.turns_per_dialog > MAX_QUAC_TURNS {
            return Err(Error::Config(format!(
                "turns_per_dialog {} exceeds {MAX_QUAC_TURNS}",
                self.turns_per_dialog
            )));
        }
        if !(0.0..=1.0).contains(&self.coreference_rate) {
            return Err(Error::Config(format!(
                "coreference_rate {} outside [0, 1]",
                self.coreference_rate
            )));
        }
        // worst case: every turn opens its own block
        let needed = self.turns_per_dialog * (1 + self.answer_len);
        if needed > self.passage_len_tokens {
            return Err(Error::Config(format!(
                "passage of {} tokens is too short for {} turns of {}-token answers (needs {needed})",
                self.passage_len_tokens, self.turns_per_dialog, self.answer_len
            )));
        }
        Ok(())
    }
}

/// A run of tokens that must stay contiguous in the passage.
enum Block {
    /// Marker followed by the answers of consecutive chained turns.
    Chain { marker: usize, turns: Vec<usize> },
    /// A lone marker word.
    Distractor { marker: usize },
}

fn dialog(config: &SynthConfig, index: usize) -> Dialog {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let n = config.turns_per_dialog;

    let mut markers: Vec<usize> = (0..MAX_QUAC_TURNS).collect();
    markers.shuffle(&mut rng);
    markers.truncate(n);
    let coref: Vec<bool> = (0..n).map(|k| k > 0 && rng.gen_bool(config.coreference_rate)).collect();

    let mut blocks: Vec<Block> = Vec::new();
    for k in 0..n {
        if coref[k] {
            if let Some(Block::Chain { turns, .. }) = blocks.iter_mut().rev().find(|b| matches!(b, Block::Chain { .. })) {
                turns.push(k);
            }
            blocks.push(Block::Distractor { marker: markers[k] });
        } else {
            blocks.push(Block::Chain {
                marker: markers[k],
                turns: vec![k],
            });
        }
    }
    blocks.shuffle(&mut rng);

    let used: usize = blocks
        .iter()
        .map(|b| match b {
            Block::Chain { turns, .. } => 1 + turns.len() * config.answer_len,
            Block::Distractor { .. } => 1,
        })
        .sum();
    let free = config.passage_len_tokens - used;
    let mut cuts: Vec<usize> = (0..blocks.len()).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();

    let mut words: Vec<String> = Vec::with_capacity(config.passage_len_tokens);
    let mut answer_tokens: Vec<(usize, usize)> = vec![(0, 0); n];
    let filler = |rng: &mut ChaCha8Rng| format!("w{}", rng.gen_range(0..config.vocab_size));
    let mut placed_filler = 0;
    for (block, &cut) in blocks.iter().zip(&cuts) {
        while placed_filler < cut {
            words.push(filler(&mut rng));
            placed_filler += 1;
        }
        match block {
            Block::Distractor { marker } => words.push(format!("m{marker}")),
            Block::Chain { marker, turns } => {
                words.push(format!("m{marker}"));
                for &k in turns {
                    let start = words.len();
                    for _ in 0..config.answer_len {
                        words.push(filler(&mut rng));
                    }
                    answer_tokens[k] = (start, words.len());
                }
            }
        }
    }
    while words.len() < config.passage_len_tokens {
        words.push(filler(&mut rng));
    }

    let mut offsets = Vec::with_capacity(words.len() + 1);
    let mut pos = 0;
    for w in &words {
        offsets.push(pos);
        pos += w.len() + 1;
    }
    let text = words.join(" ");
    let turns = (0..n)
        .map(|k| {
            let (first, end) = answer_tokens[k];
            let char_start = offsets[first];
            let char_end = offsets[end - 1] + words[end - 1].len();
            let gold = AnswerSpan {
                char_start,
                char_end,
                text: text[char_start..char_end].to_string(),
            };
            let question = if coref[k] {
                ANAPHOR_QUESTION.to_string()
            } else {
                format!("what follows m{} ?", markers[k])
            };
            Turn {
                turn_index: k + 1,
                question,
                gold_answer: gold.clone(),
                human_f1: Some(1.0),
                references: vec![gold],
            }
        })
        .collect();

    Dialog {
        dialog_id: format!("synth-{}-{index}", config.seed),
        passage: Passage {
            id: format!("synth-{}-{index}", config.seed),
            title: "synthetic".into(),
            text,
            cannot_answer_appended: false,
        },
        turns,
    }
}

/// Generates `n_dialogs` dialogs; the same config always yields the same data.
pub fn generate(config: &SynthConfig) -> Result<Vec<Dialog>> {
    config.validate()?;
    Ok((0..config.n_dialogs)
        .into_par_iter()
        .map(|i| dialog(config, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_dataset;

    fn config(rate: f64) -> SynthConfig {
        SynthConfig {
            n_dialogs: 30,
            turns_per_dialog: 4,
            passage_len_tokens: 30,
            vocab_size: 20,
            seed: 5,
            coreference_rate: rate,
            answer_len: 2,
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&config(0.5)).unwrap(), generate(&config(0.5)).unwrap());
        let other = SynthConfig { seed: 6, ..config(0.5) };
        assert_ne!(generate(&config(0.5)).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn passes_validation() {
        for rate in [0.0, 0.3, 1.0] {
            let dialogs = generate(&config(rate)).unwrap();
            let report = validate_dataset(&dialogs);
            assert_eq!((report.errors, report.warnings), (0, 0));
            assert_eq!(report.turns, 120);
            for d in &dialogs {
                assert_eq!(d.passage.text.split(' ').count(), 30);
            }
        }
    }

    #[test]
    fn full_coreference_forms_chain() {
        for d in generate(&config(1.0)).unwrap() {
            assert!(d.turns[0].question.starts_with("what follows m"));
            for pair in d.turns.windows(2) {
                assert_eq!(pair[1].question, ANAPHOR_QUESTION);
                // previous answer, one space, next answer
                assert_eq!(pair[1].gold_answer.char_start, pair[0].gold_answer.char_end + 1);
            }
            let marker = d.turns[0].question.split(' ').nth(2).unwrap();
            let words: Vec<&str> = d.passage.text.split(' ').collect();
            assert_eq!(words.iter().filter(|w| w.starts_with('m')).count(), 4);
            let at = words.iter().position(|w| *w == marker).unwrap();
            assert_eq!(words[at + 1..at + 3].join(" "), d.turns[0].gold_answer.text);
        }
    }

    #[test]
    fn no_coreference_is_self_contained() {
        for d in generate(&config(0.0)).unwrap() {
            for t in &d.turns {
                let marker = t.question.split(' ').nth(2).unwrap();
                let words: Vec<&str> = d.passage.text.split(' ').collect();
                let at = words.iter().position(|w| *w == marker).unwrap();
                assert_eq!(words[at + 1..at + 3].join(" "), t.gold_answer.text);
            }
        }
    }

    #[test]
    fn too_short_passage() {
        let c = SynthConfig {
            passage_len_tokens: 11,
            ..config(1.0)
        };
        assert!(generate(&c).is_err());
        let c = SynthConfig {
            turns_per_dialog: 13,
            passage_len_tokens: 100,
            ..config(1.0)
        };
        assert!(generate(&c).is_err());
    }
}
