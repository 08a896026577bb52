//! Seeded inputs shared by the benchmarks.

use punctscl::corpus::{batchify, build_vocabulary, generate_synthetic_corpus, Batch, DEFAULT_RATIOS};
use punctscl::{EncoderConfig, PunctLabel, PunctuationModel, Tensor};
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = punctscl::seed::rng(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Labels drawn with the default class ratios.
pub fn random_labels(n: usize, seed: u64) -> Vec<PunctLabel> {
    let mut rng = punctscl::seed::rng(seed, &[]);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (label, r) in PunctLabel::ALL.iter().zip(DEFAULT_RATIOS) {
                acc += r;
                if u < acc {
                    return *label;
                }
            }
            PunctLabel::Question
        })
        .collect()
}

/// The default toy encoder and one full training batch of synthetic text.
pub fn toy_model_and_batch() -> (PunctuationModel, Batch) {
    let tokens = generate_synthetic_corpus(4096, 7, DEFAULT_RATIOS).unwrap();
    let vocab = build_vocabulary(&tokens, 1).unwrap();
    let batch = batchify(&tokens, &vocab, 128, 16, None).unwrap().remove(0);
    let config = EncoderConfig {
        vocab_size: vocab.len(),
        ..EncoderConfig::default()
    };
    (PunctuationModel::init(config, 1).unwrap(), batch)
}
