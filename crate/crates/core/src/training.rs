//! AdamW training loop with per-epoch validation and best-epoch selection.

use serde::{Deserialize, Serialize};

use crate::corpus::{shuffle_windows, Batch};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::losses::{compute_loss, LossConfig};
use crate::model::{EncoderConfig, Parameter, PunctuationModel};
use crate::numerics::Tape;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Window length used when batching the corpus.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            loss: LossConfig::default(),
            max_len: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size and max_len must be positive".into()));
        }
        // lr = 0 is accepted: it turns training into a reproducible no-op.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be ≥ 0",
                self.learning_rate
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas ({b1}, {b2}) outside [0, 1)")));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight_decay ≥ 0".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &[Parameter]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update. `grads[i] == None` means the
/// parameter received no gradient and is treated as zero.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves parameters and state untouched.
pub fn adamw_step(
    params: &mut [Parameter],
    grads: &[Option<&[f64]>],
    state: &mut AdamWState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.value.len() {
                return Err(Error::contract(format!("gradient size mismatch for {}", p.name)));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at index {i} is {}",
                    p.name, g[i]
                )));
            }
        }
    }
    state.t += 1;
    let (b1, b2) = config.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (lr, eps, wd) = (config.learning_rate, config.eps, config.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = p.value.data_mut();
        for j in 0..theta.len() {
            let g = grads[i].map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[j]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: Option<f64>,
    pub scl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's optimizer steps.
    pub train_loss: LossBreakdown,
    pub valid_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_f1: f64,
    pub train: TrainConfig,
    pub model: EncoderConfig,
}

/// Trains `model` and returns the parameters from the epoch with the
/// highest validation overall F1 (earliest epoch on ties).
pub fn train(
    model: PunctuationModel,
    train_batches: &[Batch],
    valid_batches: &[Batch],
    config: &TrainConfig,
) -> Result<(PunctuationModel, RunRecord)> {
    train_with_observer(model, train_batches, valid_batches, config, |_| {})
}

/// [`train`], calling `observer` after every epoch.
pub fn train_with_observer(
    mut model: PunctuationModel,
    train_batches: &[Batch],
    valid_batches: &[Batch],
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(PunctuationModel, RunRecord)> {
    config.validate()?;
    if train_batches.is_empty() || valid_batches.is_empty() {
        return Err(Error::contract("training needs non-empty train and validation batches"));
    }
    let mut state = AdamWState::new(model.parameters());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, PunctuationModel)> = None;

    for epoch in 0..config.epochs {
        let batches = shuffle_windows(train_batches, seed::derive(config.seed, &[epoch as u64, 0]))?;
        let mut sums = (0.0, 0.0, 0.0);
        let (mut has_ce, mut has_scl) = (false, false);
        for (step, batch) in batches.iter().enumerate() {
            let stream = [epoch as u64, step as u64];
            let mut tape = Tape::new();
            let out = model.forward(
                &mut tape,
                batch,
                true,
                seed::derive(config.seed, &[stream[0], stream[1], 1]),
            )?;
            let parts = compute_loss(
                &mut tape,
                out.logits,
                out.reps,
                &batch.labels,
                &batch.mask,
                &config.loss,
                seed::derive(config.seed, &[stream[0], stream[1], 2]),
            )?;
            let total = tape.value(parts.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is {total} at epoch {epoch}, step {step}"
                )));
            }
            tape.backward(parts.total)?;
            let grads: Vec<Option<&[f64]>> = out.params.iter().map(|&v| tape.grad(v)).collect();
            adamw_step(model.parameters_mut(), &grads, &mut state, config)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, step {step}: {e}")))?;
            sums.0 += total;
            if let Some(ce) = parts.ce {
                sums.1 += ce;
                has_ce = true;
            }
            if let Some(scl) = parts.scl {
                sums.2 += scl;
                has_scl = true;
            }
        }
        let steps = batches.len() as f64;
        let report = evaluate(&model, valid_batches, &EvalOptions::default())?;
        let record = EpochRecord {
            epoch,
            train_loss: LossBreakdown {
                total: sums.0 / steps,
                ce: has_ce.then(|| sums.1 / steps),
                scl: has_scl.then(|| sums.2 / steps),
            },
            valid_f1: report.overall.f1,
        };
        observer(&record);
        if best.as_ref().is_none_or(|b| record.valid_f1 > b.1) {
            best = Some((epoch, record.valid_f1, model.clone()));
        }
        epochs.push(record);
    }

    let (best_epoch, best_valid_f1, best_model) = best.expect("epochs ≥ 1");
    let record = RunRecord {
        seed: config.seed,
        epochs,
        best_epoch,
        best_valid_f1,
        train: config.clone(),
        model: model.config().clone(),
    };
    Ok((best_model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{batchify, build_vocabulary, generate_synthetic_corpus, DEFAULT_RATIOS};
    use crate::losses::LossKind;
    use crate::numerics::Tensor;

    fn scalar_param(v: f64) -> Vec<Parameter> {
        vec![Parameter {
            name: "theta".into(),
            value: Tensor::new(vec![1], vec![v]).unwrap(),
        }]
    }

    #[test]
    fn adamw_first_step_by_hand() {
        let config = TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_param(0.0);
        let mut state = AdamWState::new(&p);
        adamw_step(&mut p, &[Some(&[1.0])], &mut state, &config).unwrap();
        // m̂ = v̂ = 1, so θ = −lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0].value.data()[0] - expected).abs() < 1e-18);
        assert!((p[0].value.data()[0] + 9.9999999e-4).abs() < 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let config = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_param(0.7);
        let mut state = AdamWState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &[Some(&[0.0])], &mut state, &config).unwrap();
        }
        assert_eq!(p[0].value.data()[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = scalar_param(0.5);
        let mut state = AdamWState::new(&p);
        let err = adamw_step(&mut p, &[Some(&[f64::NAN])], &mut state, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(p[0].value.data()[0], 0.5);
        assert_eq!(state.t, 0);
    }

    fn tiny_setup(seed: u64) -> (PunctuationModel, Vec<Batch>, Vec<Batch>) {
        let train = generate_synthetic_corpus(1200, seed, DEFAULT_RATIOS).unwrap();
        let valid = generate_synthetic_corpus(400, seed + 1, DEFAULT_RATIOS).unwrap();
        let vocab = build_vocabulary(&train, 1).unwrap();
        let config = EncoderConfig {
            vocab_size: vocab.len(),
            model_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 32,
            dropout: 0.1,
            max_len: 32,
        };
        let model = PunctuationModel::init(config, seed).unwrap();
        (
            model,
            batchify(&train, &vocab, 32, 8, None).unwrap(),
            batchify(&valid, &vocab, 32, 8, None).unwrap(),
        )
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let (model, tr, va) = tiny_setup(1);
        let config = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (best, record) = train(model.clone(), &tr, &va, &config).unwrap();
        assert_eq!(best, model);
        assert_eq!(record.epochs.len(), 1);
    }

    #[test]
    fn runs_are_reproducible_and_select_the_best_epoch() {
        let (model, tr, va) = tiny_setup(2);
        let config = TrainConfig {
            epochs: 3,
            learning_rate: 3e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let (m1, r1) = train(model.clone(), &tr, &va, &config).unwrap();
        let (m2, r2) = train(model, &tr, &va, &config).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        let max = r1.epochs.iter().map(|e| e.valid_f1).fold(f64::MIN, f64::max);
        assert_eq!(r1.best_valid_f1, max);
        let first_max = r1.epochs.iter().position(|e| e.valid_f1 == max).unwrap();
        assert_eq!(r1.best_epoch, first_max);
        let report = evaluate(&m1, &va, &EvalOptions::default()).unwrap();
        assert_eq!(report.overall.f1, max);
        assert!(r1.epochs.iter().all(|e| e.train_loss.scl.is_some()));
    }

    #[test]
    fn lambda_zero_trajectory_equals_cross_entropy() {
        let (model, tr, va) = tiny_setup(3);
        let ce = TrainConfig {
            epochs: 2,
            learning_rate: 3e-3,
            loss: LossConfig::cross_entropy(),
            ..TrainConfig::default()
        };
        let zero = TrainConfig {
            loss: LossConfig {
                kind: LossKind::SclCombined,
                lambda: 0.0,
                ..LossConfig::default()
            },
            ..ce.clone()
        };
        let (m1, r1) = train(model.clone(), &tr, &va, &ce).unwrap();
        let (m2, r2) = train(model, &tr, &va, &zero).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.epochs, r2.epochs);
        assert!(r1.epochs.iter().all(|e| e.train_loss.scl.is_none()));
    }

    #[test]
    fn empty_inputs_and_bad_configs_rejected() {
        let (model, tr, va) = tiny_setup(4);
        assert!(train(model.clone(), &[], &va, &TrainConfig::default()).is_err());
        assert!(train(model.clone(), &tr, &[], &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(model, &tr, &va, &bad), Err(Error::Config(_))));
    }
}
