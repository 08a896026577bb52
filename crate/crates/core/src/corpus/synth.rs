//! Synthetic token/label corpora with controllable class imbalance.
//!
//! Labels are drawn i.i.d. from the requested ratios, which fixes the label
//! distribution exactly in expectation. Surface forms are then chosen with
//! knowledge of the label sequence so that each class leaves learnable
//! traces:
//!
//! * the word carrying COMMA is usually a clause-final word, and the word
//!   after it is often a conjunction;
//! * statements usually end in a sentence-final word and questions in a
//!   question-final word (a few statements end in one too); sentences open
//!   with a subject or an interrogative, so the next token also hints at the
//!   boundary;
//! * a small fraction of comma and sentence-final cue words also appears at
//!   unmarked positions, so no single word identifies its label.
//!
//! Every class thus has a word-level cue that a small encoder can pick up
//! within a few epochs; the contextual cues are there for models that get
//! further.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::IndexedRandom;
use rand::Rng;

use super::{LabeledToken, PunctLabel};
use crate::error::{Error, Result};
use crate::seed;

/// O / COMMA / PERIOD / QUESTION shares of a large spoken-English corpus.
pub const DEFAULT_RATIOS: [f64; 4] = [0.857, 0.0753, 0.063, 0.0047];

const INTERROGATIVES: &[&str] = &[
    "what", "why", "how", "where", "when", "who", "which", "whose", "do", "does", "did", "can", "could", "would", "is",
    "are", "should", "will",
];

const SUBJECTS: &[&str] = &[
    "the", "we", "i", "they", "it", "this", "there", "she", "he", "you", "our", "my", "that", "these", "people",
    "everyone", "nobody", "some", "most", "a",
];

const CLAUSE_FINAL: &[&str] = &[
    "however",
    "well",
    "yes",
    "first",
    "also",
    "though",
    "today",
    "actually",
    "indeed",
    "instead",
    "meanwhile",
    "later",
    "finally",
    "otherwise",
    "anyway",
    "okay",
    "therefore",
    "second",
];

const CONJUNCTIONS: &[&str] = &[
    "and", "but", "because", "so", "or", "while", "although", "unless", "since", "whereas",
];

const QUESTION_FINAL: &[&str] = &[
    "really", "then", "anymore", "either", "mean", "sure", "true", "else", "perhaps", "exactly",
];

const SENTENCE_FINAL: &[&str] = &[
    "again",
    "here",
    "now",
    "too",
    "time",
    "world",
    "work",
    "way",
    "life",
    "together",
    "before",
    "ago",
    "tomorrow",
    "forever",
    "home",
    "everywhere",
    "yet",
    "enough",
    "right",
    "problem",
    "question",
    "answer",
    "future",
    "planet",
];

/// Size of the generated content-word lexicon.
const CONTENT_WORDS: usize = 600;
const SYLLABLES: &[&str] = &[
    "ba", "ke", "lo", "mi", "nu", "pa", "re", "si", "to", "vu", "dra", "fen", "gor", "hal", "jin", "kor", "lum", "mor",
    "nel", "pix", "quo", "ras", "sel", "tor", "ulm", "ves", "wim", "zan",
];

/// Probability that a cue position actually receives a cue word.
const CUE_RATE: f64 = 0.75;
/// Probability that a statement opens with an interrogative anyway.
const FALSE_QUESTION_START: f64 = 0.03;
/// Probability that a cued statement ends in a question-final word.
const STATEMENT_WITH_QUESTION_WORD: f64 = 0.02;
/// Probability that an unmarked word is replaced by a random cue word.
const CUE_NOISE: f64 = 0.06;

fn content_lexicon() -> Vec<String> {
    // fixed stream: the lexicon is part of the generator, not of the seed
    let mut rng = seed::rng(0x5eed_1e41c0, &[]);
    let mut words: Vec<String> = Vec::with_capacity(CONTENT_WORDS);
    while words.len() < CONTENT_WORDS {
        let n = rng.random_range(2..=3);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(&mut rng).unwrap()).collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

fn validate_ratios(ratios: &[f64; 4]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::contract(format!("ratios must be non-negative: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("ratios must sum to 1, got {sum}")));
    }
    Ok(())
}

pub fn generate_synthetic_corpus(n_tokens: usize, seed: u64, ratios: [f64; 4]) -> Result<Vec<LabeledToken>> {
    validate_ratios(&ratios)?;
    if n_tokens == 0 {
        return Err(Error::contract("n_tokens must be at least 1"));
    }
    let mut rng = seed::rng(seed, &[0x5747]);
    let dist = WeightedIndex::new(ratios).map_err(|e| Error::contract(e.to_string()))?;
    let labels: Vec<PunctLabel> = (0..n_tokens).map(|_| PunctLabel::ALL[dist.sample(&mut rng)]).collect();

    let content = content_lexicon();
    let terminates = |l: PunctLabel| matches!(l, PunctLabel::Period | PunctLabel::Question);

    let mut out = Vec::with_capacity(n_tokens);
    let mut sentence_start = 0;
    while sentence_start < n_tokens {
        let end = (sentence_start..n_tokens)
            .find(|&i| terminates(labels[i]))
            .unwrap_or(n_tokens - 1);
        let question = labels[end] == PunctLabel::Question;
        for i in sentence_start..=end {
            let label = labels[i];
            let after_comma = i > sentence_start && labels[i - 1] == PunctLabel::Comma;
            let word: &str = if i == sentence_start {
                if question || rng.random_bool(FALSE_QUESTION_START) {
                    INTERROGATIVES.choose(&mut rng).unwrap()
                } else if rng.random_bool(CUE_RATE) {
                    SUBJECTS.choose(&mut rng).unwrap()
                } else {
                    content.choose(&mut rng).unwrap()
                }
            } else if label != PunctLabel::O && rng.random_bool(CUE_RATE) {
                let pool = match label {
                    PunctLabel::Comma => CLAUSE_FINAL,
                    PunctLabel::Question => QUESTION_FINAL,
                    _ if rng.random_bool(STATEMENT_WITH_QUESTION_WORD) => QUESTION_FINAL,
                    _ => SENTENCE_FINAL,
                };
                pool.choose(&mut rng).unwrap()
            } else if after_comma && rng.random_bool(CUE_RATE) {
                CONJUNCTIONS.choose(&mut rng).unwrap()
            } else if label == PunctLabel::O && rng.random_bool(CUE_NOISE) {
                let pool = [CLAUSE_FINAL, SENTENCE_FINAL, SUBJECTS].choose(&mut rng).unwrap();
                pool.choose(&mut rng).unwrap()
            } else {
                content.choose(&mut rng).unwrap()
            };
            out.push(LabeledToken::new(word, label));
        }
        sentence_start = end + 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::label_histogram;

    #[test]
    fn degenerate_ratios_give_all_o() {
        let c = generate_synthetic_corpus(500, 3, [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(c.iter().all(|t| t.label == PunctLabel::O));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_corpus(2000, 9, DEFAULT_RATIOS).unwrap();
        let b = generate_synthetic_corpus(2000, 9, DEFAULT_RATIOS).unwrap();
        let c = generate_synthetic_corpus(2000, 10, DEFAULT_RATIOS).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_ratios_rejected() {
        assert!(generate_synthetic_corpus(10, 0, [0.5, 0.5, 0.5, 0.0]).is_err());
        assert!(generate_synthetic_corpus(10, 0, [1.1, -0.1, 0.0, 0.0]).is_err());
        assert!(generate_synthetic_corpus(0, 0, DEFAULT_RATIOS).is_err());
    }

    #[test]
    fn tokens_are_clean_lowercase_words() {
        for t in generate_synthetic_corpus(5000, 1, DEFAULT_RATIOS).unwrap() {
            assert!(!t.text.is_empty());
            assert!(t.text.chars().all(|c| c.is_ascii_lowercase()));
        }
    }

    #[test]
    fn question_count_within_binomial_interval() {
        let n = 200_000;
        let c = generate_synthetic_corpus(n, 2024, DEFAULT_RATIOS).unwrap();
        let q = label_histogram(&c).count(PunctLabel::Question) as f64;
        // normal approximation to Binomial(n, 0.0047), two-sided 99.9%
        let p = DEFAULT_RATIOS[3];
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        let (lo, hi) = (mean - 3.2905 * sd, mean + 3.2905 * sd);
        assert!(lo > 760.0 && hi < 1120.0);
        assert!((760.0..=1120.0).contains(&q), "{q}");
        assert!(q >= lo && q <= hi, "{q} outside [{lo}, {hi}]");
    }

    #[test]
    fn question_sentences_open_with_interrogatives_mostly() {
        let c = generate_synthetic_corpus(100_000, 5, DEFAULT_RATIOS).unwrap();
        let mut opens = 0;
        let mut interrogative = 0;
        let mut start = 0;
        for (i, t) in c.iter().enumerate() {
            if matches!(t.label, PunctLabel::Period | PunctLabel::Question) {
                if t.label == PunctLabel::Question {
                    opens += 1;
                    interrogative += INTERROGATIVES.contains(&c[start].text.as_str()) as usize;
                }
                start = i + 1;
            }
        }
        assert!(opens > 0);
        assert_eq!(opens, interrogative);
    }
}
