//! Token/label sequences: parsing, vocabularies, batching and label
//! statistics.

mod batch;
mod synth;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{batchify, shuffle_windows, Batch, Window};
pub use synth::{generate_synthetic_corpus, DEFAULT_RATIOS};

/// Punctuation class attached to the word it follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PunctLabel {
    O,
    #[serde(rename = "COMMA")]
    Comma,
    #[serde(rename = "PERIOD")]
    Period,
    #[serde(rename = "QUESTION")]
    Question,
}

impl PunctLabel {
    pub const ALL: [PunctLabel; 4] = [
        PunctLabel::O,
        PunctLabel::Comma,
        PunctLabel::Period,
        PunctLabel::Question,
    ];

    /// The classes that are scored; `O` is excluded.
    pub const SCORED: [PunctLabel; 3] = [PunctLabel::Comma, PunctLabel::Period, PunctLabel::Question];

    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PunctLabel::O => "O",
            PunctLabel::Comma => "COMMA",
            PunctLabel::Period => "PERIOD",
            PunctLabel::Question => "QUESTION",
        }
    }
}

impl fmt::Display for PunctLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PunctLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown label {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledToken {
    pub text: String,
    pub label: PunctLabel,
}

impl LabeledToken {
    pub fn new(text: impl Into<String>, label: PunctLabel) -> Self {
        Self {
            text: text.into(),
            label,
        }
    }
}

/// Which characters mark which class in raw text.
///
/// Alphanumeric characters form words; every other character is stripped
/// from the token text. The first mapped character after a word's last
/// alphanumeric sets its label.
#[derive(Debug, Clone)]
pub struct PunctuationMap {
    marks: Vec<(char, PunctLabel)>,
}

impl Default for PunctuationMap {
    fn default() -> Self {
        use PunctLabel::*;
        Self {
            marks: vec![
                (',', Comma),
                (';', Comma),
                (':', Comma),
                ('.', Period),
                ('!', Period),
                ('?', Question),
            ],
        }
    }
}

impl PunctuationMap {
    pub fn new(marks: Vec<(char, PunctLabel)>) -> Self {
        Self { marks }
    }

    pub fn label_of(&self, c: char) -> Option<PunctLabel> {
        self.marks.iter().find(|(m, _)| *m == c).map(|&(_, l)| l)
    }
}

pub fn parse_plain_text(text: &str) -> Vec<LabeledToken> {
    parse_plain_text_with(text, &PunctuationMap::default())
}

pub fn parse_plain_text_with(text: &str, map: &PunctuationMap) -> Vec<LabeledToken> {
    let mut out: Vec<LabeledToken> = Vec::new();
    for raw in text.split_whitespace() {
        let word: String = raw
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        let tail = match raw.rfind(|c: char| c.is_alphanumeric()) {
            Some(pos) => &raw[pos..],
            None => raw,
        };
        let mark = tail.chars().find_map(|c| map.label_of(c));
        if word.is_empty() {
            // detached mark such as "hello , world"
            if let (Some(label), Some(prev)) = (mark, out.last_mut()) {
                if prev.label == PunctLabel::O {
                    prev.label = label;
                }
            }
            continue;
        }
        out.push(LabeledToken::new(word, mark.unwrap_or(PunctLabel::O)));
    }
    out
}

/// Parses `token<TAB>label` lines; blank lines are skipped.
pub fn parse_tsv(input: &str) -> Result<Vec<LabeledToken>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let (token, label) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected token<TAB>label".into(),
        })?;
        if token.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty token".into(),
            });
        }
        let label = label
            .parse()
            .map_err(|message| Error::Parse { line: line_no, message })?;
        out.push(LabeledToken::new(token.to_lowercase(), label));
    }
    Ok(out)
}

pub fn to_tsv(tokens: &[LabeledToken]) -> String {
    let mut s = String::with_capacity(tokens.len() * 12);
    for t in tokens {
        s.push_str(&t.text);
        s.push('\t');
        s.push_str(t.label.as_str());
        s.push('\n');
    }
    s
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Word-level vocabulary with `PAD = 0` and `UNK = 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list (as stored in a
    /// checkpoint).
    pub fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Config("vocabulary must start with <pad>, <unk>".into()));
        }
        let ids: HashMap<String, usize> = tokens.iter().enumerate().skip(2).map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() - 2 {
            return Err(Error::Config("duplicate vocabulary entry".into()));
        }
        Ok(Self {
            tokens,
            ids,
            min_frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }
}

/// Assigns ids to tokens seen at least `min_frequency` times, most frequent
/// first, ties in lexicographic order.
pub fn build_vocabulary(tokens: &[LabeledToken], min_frequency: usize) -> Result<Vocabulary> {
    if min_frequency == 0 {
        return Err(Error::contract("min_frequency must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t.text.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_frequency && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let list = [PAD_TOKEN, UNK_TOKEN]
        .into_iter()
        .chain(kept.into_iter().map(|(t, _)| t))
        .map(String::from)
        .collect();
    Vocabulary::from_tokens(list, min_frequency)
}

/// Label counts in `O, COMMA, PERIOD, QUESTION` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelHistogram {
    pub counts: [usize; 4],
}

impl LabelHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, label: PunctLabel) -> usize {
        self.counts[label.index()]
    }

    pub fn ratios(&self) -> [f64; 4] {
        let total = self.total();
        if total == 0 {
            return [0.0; 4];
        }
        self.counts.map(|c| c as f64 / total as f64)
    }
}

impl Serialize for LabelHistogram {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(5))?;
        for label in PunctLabel::ALL {
            m.serialize_entry(label.as_str(), &self.count(label))?;
        }
        m.serialize_entry("ratios", &self.ratios())?;
        m.end()
    }
}

pub fn label_histogram(tokens: &[LabeledToken]) -> LabelHistogram {
    let mut h = LabelHistogram::default();
    for t in tokens {
        h.counts[t.label.index()] += 1;
    }
    h
}
