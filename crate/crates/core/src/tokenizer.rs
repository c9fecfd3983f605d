//! Uncased WordPiece tokenization that keeps character offsets into the
//! original text.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const MAX_CHARS_PER_WORD: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    pub pad_id: usize,
    pub unk_id: usize,
    pub cls_id: usize,
    pub sep_id: usize,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list; the id of each token is
    /// its position. `[PAD]` must come first.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?} at line {}", id + 1)));
            }
        }
        let special = |name: &str| {
            token_to_id
                .get(name)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing special token {name}")))
        };
        let pad_id = special(PAD)?;
        if pad_id != 0 {
            return Err(Error::Vocab(format!("{PAD} must have id 0, found {pad_id}")));
        }
        let unk_id = special(UNK)?;
        let cls_id = special(CLS)?;
        let sep_id = special(SEP)?;
        Ok(Vocab {
            tokens,
            token_to_id,
            pad_id,
            unk_id,
            cls_id,
            sep_id,
        })
    }

    /// Whole-word vocabulary covering every normalized word in `texts`,
    /// specials first, remaining words sorted.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| basic_normalize(t).into_iter().map(|(w, _)| w))
            .collect();
        let specials = [PAD, UNK, CLS, SEP];
        let tokens = specials
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !specials.contains(&w.as_str())));
        Vocab::from_tokens(tokens).expect("specials are present and words are deduplicated")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_tokens(raw.lines().map(|l| l.trim_end_matches('\r')))
}

/// Character span `[start, end)` into the original text.
pub type CharSpan = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub char_spans: Vec<CharSpan>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn is_punctuation(c: char) -> bool {
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    matches!(c as u32,
        0x00A1..=0x00BF
        | 0x00D7 | 0x00F7
        | 0x2010..=0x2027
        | 0x2030..=0x205E
        | 0x2E00..=0x2E7F
        | 0x3001..=0x3003
        | 0x3008..=0x3011
        | 0xFF01..=0xFF0F
        | 0xFF1A..=0xFF20)
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0xF900..=0xFAFF
        | 0x2F800..=0x2FA1F)
}

/// Lowercases and splits on whitespace; punctuation and CJK characters become
/// single-character words. Spans index the original (un-lowercased) text.
pub fn basic_normalize(text: &str) -> Vec<(String, CharSpan)> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let flush = |current: &mut String, start: usize, end: usize, words: &mut Vec<_>| {
        if !current.is_empty() {
            words.push((std::mem::take(current), (start, end)));
        }
    };
    let mut pos = 0;
    for (pos_i, c) in text.chars().enumerate() {
        pos = pos_i;
        if c.is_whitespace() || c.is_control() || c == '\u{FFFD}' {
            flush(&mut current, start, pos, &mut words);
        } else if is_punctuation(c) || is_cjk(c) {
            flush(&mut current, start, pos, &mut words);
            words.push((c.to_lowercase().collect(), (pos, pos + 1)));
        } else {
            if current.is_empty() {
                start = pos;
            }
            current.extend(c.to_lowercase());
        }
        pos += 1;
    }
    flush(&mut current, start, pos, &mut words);
    words
}

/// Greedy longest-match-first subword split. Any unmatched position turns the
/// whole word into `[UNK]`.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_CHARS_PER_WORD {
        return vec![UNK.to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, "##");
            }
            if vocab.id(&candidate).is_some() {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => return vec![UNK.to_string()],
        }
    }
    pieces
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
}

impl Tokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Tokenizer { vocab }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let mut out = TokenizedText {
            tokens: Vec::new(),
            ids: Vec::new(),
            char_spans: Vec::new(),
        };
        for (word, span) in basic_normalize(text) {
            for piece in wordpiece(&word, &self.vocab) {
                let id = self.vocab.id(&piece).unwrap_or(self.vocab.unk_id);
                out.tokens.push(piece);
                out.ids.push(id);
                out.char_spans.push(span);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocab {
        Vocab::from_tokens([PAD, UNK, CLS, SEP].iter().chain(words.iter()).copied()).unwrap()
    }

    #[test]
    fn load_vocab_line_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        fs::write(&path, "[PAD]\n[UNK]\n[CLS]\n[SEP]\nable\n##able").unwrap();
        let v = load_vocab(&path).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("able"), Some(4));
        assert_eq!(v.id("##able"), Some(5));
        assert_eq!((v.pad_id, v.unk_id, v.cls_id, v.sep_id), (0, 1, 2, 3));
    }

    #[test]
    fn vocab_missing_sep() {
        let err = Vocab::from_tokens(["[PAD]", "[UNK]", "[CLS]", "able"]).unwrap_err();
        assert!(err.to_string().contains("[SEP]"));
    }

    #[test]
    fn vocab_duplicate() {
        let err = Vocab::from_tokens(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "able", "able"]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn vocab_pad_must_be_zero() {
        assert!(Vocab::from_tokens(["[UNK]", "[PAD]", "[CLS]", "[SEP]"]).is_err());
    }

    #[test]
    fn normalize_question() {
        let words = basic_normalize("Why did people feel that way?");
        let just: Vec<&str> = words.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(just, ["why", "did", "people", "feel", "that", "way", "?"]);
        assert_eq!(words.last().unwrap().1, (28, 29));
        assert_eq!(words[0].1, (0, 3));
    }

    #[test]
    fn normalize_empty_and_punct() {
        assert!(basic_normalize("").is_empty());
        assert!(basic_normalize("   \t\n").is_empty());
        assert_eq!(
            basic_normalize("A-b"),
            vec![
                ("a".to_string(), (0, 1)),
                ("-".to_string(), (1, 2)),
                ("b".to_string(), (2, 3))
            ]
        );
    }

    #[test]
    fn normalize_multibyte_spans() {
        let words = basic_normalize("Über café.");
        assert_eq!(
            words,
            vec![
                ("über".to_string(), (0, 4)),
                ("café".to_string(), (5, 9)),
                (".".to_string(), (9, 10))
            ]
        );
    }

    #[test]
    fn wordpiece_greedy() {
        let v = vocab(&["un", "##able", "able", "unab", "##le"]);
        // "unab" is the longest prefix, then "##le"
        assert_eq!(wordpiece("unable", &v), ["unab", "##le"]);
        let v = vocab(&["un", "##able", "able"]);
        assert_eq!(wordpiece("unable", &v), ["un", "##able"]);
        assert_eq!(wordpiece("able", &v), ["able"]);
        assert_eq!(wordpiece("zxq", &v), [UNK]);
        // a dead end partway through also yields [UNK]
        assert_eq!(wordpiece("unablez", &v), [UNK]);
    }

    #[test]
    fn pieces_share_word_span() {
        let v = vocab(&["un", "##able", "to", "go"]);
        let t = Tokenizer::new(v).tokenize("Unable to GO");
        assert_eq!(t.tokens, ["un", "##able", "to", "go"]);
        assert_eq!(t.char_spans, [(0, 6), (0, 6), (7, 9), (10, 12)]);
        assert_eq!(t.ids.len(), 4);
    }

    #[test]
    fn from_texts_covers_words() {
        let v = Vocab::from_texts(["Hello world", "world, again"]);
        assert_eq!(v.token(0), Some(PAD));
        for w in ["hello", "world", ",", "again"] {
            assert!(v.id(w).is_some(), "{w}");
        }
        assert_eq!(v.len(), 8);
    }
}
