use rand::seq::SliceRandom;

use super::{LabeledToken, PunctLabel, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::seed;

/// One contiguous slice of the token stream, at most `max_len` long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub token_ids: Vec<usize>,
    pub labels: Vec<PunctLabel>,
}

/// Padded `[rows × seq_len]` block of windows.
///
/// Cells where `mask` is false hold `PAD_ID` and label `O`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    rows: usize,
    seq_len: usize,
    pub token_ids: Vec<usize>,
    pub labels: Vec<PunctLabel>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn from_windows(windows: &[Window]) -> Result<Self> {
        if windows.is_empty() || windows.iter().any(|w| w.token_ids.is_empty()) {
            return Err(Error::contract("a batch needs at least one non-empty window"));
        }
        let seq_len = windows.iter().map(|w| w.token_ids.len()).max().unwrap_or(0);
        let rows = windows.len();
        let mut token_ids = vec![PAD_ID; rows * seq_len];
        let mut labels = vec![PunctLabel::O; rows * seq_len];
        let mut mask = vec![false; rows * seq_len];
        for (r, w) in windows.iter().enumerate() {
            if w.labels.len() != w.token_ids.len() {
                return Err(Error::contract("window ids and labels differ in length"));
            }
            let base = r * seq_len;
            token_ids[base..base + w.token_ids.len()].copy_from_slice(&w.token_ids);
            labels[base..base + w.labels.len()].copy_from_slice(&w.labels);
            mask[base..base + w.token_ids.len()].fill(true);
        }
        Ok(Self {
            rows,
            seq_len,
            token_ids,
            labels,
            mask,
        })
    }

    /// Builds a batch from raw matrices, e.g. for tests that plant content in
    /// padding cells.
    pub fn from_parts(
        rows: usize,
        seq_len: usize,
        token_ids: Vec<usize>,
        labels: Vec<PunctLabel>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = rows * seq_len;
        if n == 0 || token_ids.len() != n || labels.len() != n || mask.len() != n {
            return Err(Error::contract(format!("batch matrices must all be {rows}x{seq_len}")));
        }
        Ok(Self {
            rows,
            seq_len,
            token_ids,
            labels,
            mask,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn valid_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Recovers the unpadded windows, in row order.
    pub fn windows(&self) -> Vec<Window> {
        (0..self.rows)
            .map(|r| {
                let cells = r * self.seq_len..(r + 1) * self.seq_len;
                let (mut token_ids, mut labels) = (Vec::new(), Vec::new());
                for i in cells {
                    if self.mask[i] {
                        token_ids.push(self.token_ids[i]);
                        labels.push(self.labels[i]);
                    }
                }
                Window { token_ids, labels }
            })
            .collect()
    }
}

fn group(windows: &[Window], batch_size: usize) -> Result<Vec<Batch>> {
    windows.chunks(batch_size).map(Batch::from_windows).collect()
}

/// Cuts the token stream into consecutive `max_len` windows and groups them
/// into batches. With a seed, window order is permuted first.
pub fn batchify(
    tokens: &[LabeledToken],
    vocab: &Vocabulary,
    max_len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if max_len == 0 || batch_size == 0 {
        return Err(Error::contract("max_len and batch_size must be at least 1"));
    }
    let mut windows: Vec<Window> = tokens
        .chunks(max_len)
        .map(|chunk| Window {
            token_ids: chunk.iter().map(|t| vocab.lookup(&t.text)).collect(),
            labels: chunk.iter().map(|t| t.label).collect(),
        })
        .collect();
    if let Some(s) = shuffle_seed {
        windows.shuffle(&mut seed::rng(s, &[]));
    }
    group(&windows, batch_size)
}

/// Re-deals the windows of `batches` in a seed-determined order, keeping
/// the batch size of the first batch.
pub fn shuffle_windows(batches: &[Batch], shuffle_seed: u64) -> Result<Vec<Batch>> {
    let Some(first) = batches.first() else {
        return Ok(Vec::new());
    };
    let mut windows: Vec<Window> = batches.iter().flat_map(Batch::windows).collect();
    windows.shuffle(&mut seed::rng(shuffle_seed, &[]));
    group(&windows, first.rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use proptest::prelude::*;

    fn tokens(n: usize) -> Vec<LabeledToken> {
        (0..n)
            .map(|i| LabeledToken::new(format!("w{}", i % 7), PunctLabel::ALL[i % 4]))
            .collect()
    }

    #[test]
    fn five_tokens_into_one_padded_batch() {
        let toks = tokens(5);
        let vocab = build_vocabulary(&toks, 1).unwrap();
        let batches = batchify(&toks, &vocab, 3, 2, None).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!((b.rows(), b.seq_len()), (2, 3));
        assert_eq!(b.mask, vec![true, true, true, true, true, false]);
        assert_eq!(b.token_ids[5], PAD_ID);
        assert_eq!(b.labels[5], PunctLabel::O);
    }

    #[test]
    fn six_tokens_batch_size_one() {
        let toks = tokens(6);
        let vocab = build_vocabulary(&toks, 1).unwrap();
        assert_eq!(batchify(&toks, &vocab, 3, 1, None).unwrap().len(), 2);
    }

    #[test]
    fn shuffling_is_seed_deterministic() {
        let toks = tokens(200);
        let vocab = build_vocabulary(&toks, 1).unwrap();
        let a = batchify(&toks, &vocab, 7, 3, Some(42)).unwrap();
        let b = batchify(&toks, &vocab, 7, 3, Some(42)).unwrap();
        let c = batchify(&toks, &vocab, 7, 3, Some(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(shuffle_windows(&a, 5).unwrap(), shuffle_windows(&b, 5).unwrap());
    }

    #[test]
    fn empty_corpus_gives_no_batches() {
        let vocab = build_vocabulary(&[], 1).unwrap();
        assert!(batchify(&[], &vocab, 4, 2, None).unwrap().is_empty());
        assert!(batchify(&[], &vocab, 0, 2, None).is_err());
    }

    proptest! {
        #[test]
        fn every_token_lands_in_exactly_one_cell(
            n in 1usize..300,
            max_len in 1usize..40,
            batch_size in 1usize..9,
            seed in proptest::option::of(any::<u64>()),
        ) {
            let toks = tokens(n);
            let vocab = build_vocabulary(&toks, 1).unwrap();
            let batches = batchify(&toks, &vocab, max_len, batch_size, seed).unwrap();
            let total: usize = batches.iter().map(Batch::valid_tokens).sum();
            prop_assert_eq!(total, n);
            for b in &batches {
                prop_assert!(b.seq_len() <= max_len);
                for i in 0..b.mask.len() {
                    if !b.mask[i] {
                        prop_assert_eq!(b.token_ids[i], PAD_ID);
                    }
                }
            }
            let mut hist = [0usize; 4];
            for b in shuffle_windows(&batches, 9).unwrap() {
                for (l, m) in b.labels.iter().zip(&b.mask) {
                    if *m { hist[l.index()] += 1; }
                }
            }
            prop_assert_eq!(hist, crate::corpus::label_histogram(&toks).counts);
        }
    }
}
