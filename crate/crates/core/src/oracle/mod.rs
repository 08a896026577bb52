//! Brute-force reference implementations used to check the production
//! losses, and a randomized suite that compares the two.
//!
//! Nothing in the reference functions calls into [`crate::losses`] or the
//! tape; they are plain loops, generic over the scalar type so that the
//! finite-difference driver can evaluate them in double-double precision.

mod precise;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

pub use precise::{Dd, Real};

use crate::corpus::PunctLabel;
use crate::error::{Error, Result};
use crate::losses::{self, SclOptions, SclReduction};
use crate::numerics::{analytic_gradient, GradientComparison, Tape, Tensor, Var, DEFAULT_STEP};
use crate::seed;

/// Largest tolerated |vectorized − reference| loss deviation.
pub const LOSS_TOLERANCE: f64 = 1e-10;
/// Largest tolerated relative gradient error against central differences.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
/// Temperatures drawn by the suite: small, unit, and 0.6 / 0.07.
pub const SUITE_TAUS: [f64; 3] = [0.25, 1.0, 8.5714];
/// Logarithmic temperature sweep over [0.05, 20].
pub const TAU_SWEEP: [f64; 9] = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0];

fn normalized<R: Real>(row: &[R]) -> Vec<R> {
    let mut norm = R::of(0.0);
    for &v in row {
        norm = norm + v * v;
    }
    let mut norm = norm.sqrt();
    if norm < R::of(1e-12) {
        norm = R::of(1e-12);
    }
    row.iter().map(|&v| v / norm).collect()
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut s = R::of(0.0);
    for k in 0..a.len() {
        s = s + a[k] * b[k];
    }
    s
}

/// Token-level supervised contrastive loss, summed over anchors, written as
/// three nested loops with no log-sum-exp tricks.
pub fn scl_reference<R: Real>(rows: &[Vec<R>], labels: &[PunctLabel], tau: f64) -> Result<R> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::contract("need at least one row and one label per row"));
    }
    let tau = R::of(tau);
    let z: Vec<Vec<R>> = rows.iter().map(|r| normalized(r)).collect();
    let n = z.len();
    let mut loss = R::of(0.0);
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = R::of(0.0);
        for k in 0..n {
            if k != i {
                denom = denom + (dot(&z[i], &z[k]) / tau).exp();
            }
        }
        let mut inner = R::of(0.0);
        for &p in &positives {
            inner = inner + ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        loss = loss - inner / R::of(positives.len() as f64);
    }
    Ok(loss)
}

pub fn scl_oracle(rows: &[Vec<f64>], labels: &[PunctLabel], tau: f64) -> Result<f64> {
    scl_reference(rows, labels, tau)
}

/// Mean of `−(1 − p_t)^γ · ln p_t` over the given rows.
pub fn focal_reference<R: Real>(logits: &[Vec<R>], labels: &[PunctLabel], gamma: f64) -> R {
    let mut total = R::of(0.0);
    for (row, label) in logits.iter().zip(labels) {
        let mut z = R::of(0.0);
        for &v in row {
            z = z + v.exp();
        }
        let p = row[label.index()].exp() / z;
        total = total - (R::of(1.0) - p).powf(gamma) * p.ln();
    }
    total / R::of(logits.len() as f64)
}

/// Mean negative log-likelihood of the true class over the given rows.
pub fn cross_entropy_oracle(logits: &[Vec<f64>], labels: &[PunctLabel]) -> f64 {
    focal_reference(logits, labels, 0.0)
}

pub fn focal_oracle(logits: &[Vec<f64>], labels: &[PunctLabel], gamma: f64) -> f64 {
    focal_reference(logits, labels, gamma)
}

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` with `f` evaluated
/// in double-double arithmetic. The perturbed coordinates and the divisor
/// are exact, so the only error left is the truncation term O(h²·f‴).
pub fn precise_central_differences<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Dd]) -> Result<Dd>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("step must be positive, got {step}")));
    }
    let mut probe: Vec<Dd> = x.iter().map(|&v| Dd::of(v)).collect();
    let h = Dd::of(step);
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe)?;
            probe[i] = orig - h;
            let down = f(&probe)?;
            probe[i] = orig;
            Ok(((up - down) / (h + h)).to_f64())
        })
        .collect()
}

fn rows_of<R: Real>(flat: &[R], cols: usize) -> Vec<Vec<R>> {
    flat.chunks(cols).map(<[R]>::to_vec).collect()
}

fn select<T: Clone>(items: &[T], mask: &[bool]) -> Vec<T> {
    items
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| x.clone())
        .collect()
}

/// Outcome of one comparison family in [`run_oracle_suite`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_deviation: f64,
    pub max_rel_deviation: f64,
    pub trials: usize,
    pub seed: u64,
    pub threshold: f64,
    pub passed: bool,
    /// Trial seeds whose deviation exceeded the threshold.
    pub failing_trials: Vec<u64>,
}

/// Deliberate faults for exercising the suite's failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the analytic token-SCL gradient before comparing.
    NegateSclGradient,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub fault: Option<Fault>,
    /// Temperatures to draw from; [`SUITE_TAUS`] when empty.
    pub taus: Vec<f64>,
}

struct Accumulator {
    report: OracleReport,
}

impl Accumulator {
    fn new(name: &str, seed: u64, threshold: f64) -> Self {
        Self {
            report: OracleReport {
                name: name.into(),
                max_abs_deviation: 0.0,
                max_rel_deviation: 0.0,
                trials: 0,
                seed,
                threshold,
                passed: true,
                failing_trials: Vec::new(),
            },
        }
    }

    /// `checked` is the quantity compared with the threshold.
    fn record(&mut self, trial_seed: u64, abs: f64, rel: f64, checked: f64) {
        let r = &mut self.report;
        r.trials += 1;
        r.max_abs_deviation = r.max_abs_deviation.max(abs);
        r.max_rel_deviation = r.max_rel_deviation.max(rel);
        if !(checked <= r.threshold) {
            r.passed = false;
            r.failing_trials.push(trial_seed);
        }
    }

    fn record_gradient(&mut self, trial_seed: u64, cmp: &GradientComparison) {
        let rel = cmp.max_relative_error();
        self.record(trial_seed, cmp.max_absolute_error(), rel, rel);
    }
}

struct Instance {
    rows: Vec<Vec<f64>>,
    labels: Vec<PunctLabel>,
    tau: f64,
}

fn draw_instance<R: Rng>(rng: &mut R, taus: &[f64], max_tokens: usize) -> Instance {
    let n = rng.random_range(2..=max_tokens);
    let d = rng.random_range(2..=16);
    let rows = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let labels = (0..n).map(|_| *PunctLabel::ALL.choose(rng).unwrap()).collect();
    Instance {
        rows,
        labels,
        tau: *taus.choose(rng).unwrap(),
    }
}

fn flat(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).expect("rectangular rows")
}

/// Compares vectorized losses against the reference loops, and analytic
/// gradients against central differences (step [`DEFAULT_STEP`]) of the
/// reference loops, on random instances.
///
/// Every report carries the seeds of any trial that broke its threshold.
pub fn run_oracle_suite(seed: u64, trials: usize, options: SuiteOptions) -> Result<Vec<OracleReport>> {
    if trials == 0 {
        return Err(Error::contract("trials must be at least 1"));
    }
    let taus = if options.taus.is_empty() {
        &SUITE_TAUS[..]
    } else {
        &options.taus[..]
    };

    let mut scl_value = Accumulator::new("token_scl_vs_loop_oracle", seed, LOSS_TOLERANCE);
    let mut ce_value = Accumulator::new("cross_entropy_vs_loop_oracle", seed, LOSS_TOLERANCE);
    let mut focal_value = Accumulator::new("focal_loss_vs_loop_oracle", seed, LOSS_TOLERANCE);
    let mut scl_grad = Accumulator::new("token_scl_gradient", seed, GRADIENT_TOLERANCE);
    let mut ce_grad = Accumulator::new("cross_entropy_gradient", seed, GRADIENT_TOLERANCE);
    let mut focal_grad = Accumulator::new("focal_loss_gradient", seed, GRADIENT_TOLERANCE);
    let mut combined_grad = Accumulator::new("combined_loss_gradient", seed, GRADIENT_TOLERANCE);

    for trial in 0..trials as u64 {
        let trial_seed = seed::derive(seed, &[trial]);
        let mut rng = seed::rng(trial_seed, &[]);

        // loss values: up to 64 tokens
        let inst = draw_instance(&mut rng, taus, 64);
        let reference = scl_oracle(&inst.rows, &inst.labels, inst.tau)?;
        let mut tape = Tape::new();
        let r = tape.constant(flat(&inst.rows));
        let mask = vec![true; inst.labels.len()];
        let v = losses::token_scl(&mut tape, r, &inst.labels, &mask, &SclOptions::new(inst.tau))?;
        let got = tape.value(v).item();
        let abs = (got - reference).abs();
        scl_value.record(trial_seed, abs, abs / reference.abs().max(1e-300), abs);

        let logits: Vec<Vec<f64>> = inst
            .rows
            .iter()
            .map(|row| (0..4).map(|j| row[j % row.len()] * 1.5).collect())
            .collect();
        let gamma = rng.random_range(0.0..3.0);
        let mut tape = Tape::new();
        let l = tape.constant(flat(&logits));
        let ce = losses::cross_entropy(&mut tape, l, &inst.labels, &mask)?;
        let fo = losses::focal_loss(&mut tape, l, &inst.labels, &mask, gamma)?;
        for (acc, got, want) in [
            (
                &mut ce_value,
                tape.value(ce).item(),
                cross_entropy_oracle(&logits, &inst.labels),
            ),
            (
                &mut focal_value,
                tape.value(fo).item(),
                focal_oracle(&logits, &inst.labels, gamma),
            ),
        ] {
            let abs = (got - want).abs();
            acc.record(trial_seed, abs, abs / want.abs().max(1e-300), abs);
        }

        // gradients: smaller instances keep the reference evaluations cheap
        let inst = draw_instance(&mut rng, taus, 12);
        let x = flat(&inst.rows);
        let (n, d, tau) = (inst.labels.len(), x.last_dim(), inst.tau);
        let labels = inst.labels;

        let lab = labels.clone();
        let mut analytic = analytic_gradient(
            &move |t: &mut Tape, v: Var| losses::token_scl(t, v, &lab, &vec![true; lab.len()], &SclOptions::new(tau)),
            &x,
        )?;
        if options.fault == Some(Fault::NegateSclGradient) {
            analytic.iter_mut().for_each(|g| *g = -*g);
        }
        let numeric =
            precise_central_differences(|p| scl_reference(&rows_of(p, d), &labels, tau), x.data(), DEFAULT_STEP)?;
        scl_grad.record_gradient(trial_seed, &GradientComparison { analytic, numeric });

        let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.85)).collect();
        let logit_x = Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect())?;
        let kept_labels = select(&labels, &mask);
        for (acc, gamma) in [
            (&mut ce_grad, None),
            (&mut focal_grad, Some(rng.random_range(0.0..3.0))),
        ] {
            let (lab, msk) = (labels.clone(), mask.clone());
            let analytic = analytic_gradient(
                &move |t: &mut Tape, v: Var| match gamma {
                    None => losses::cross_entropy(t, v, &lab, &msk),
                    Some(g) => losses::focal_loss(t, v, &lab, &msk, g),
                },
                &logit_x,
            )?;
            let numeric = precise_central_differences(
                |p| {
                    Ok(focal_reference(
                        &select(&rows_of(p, 4), &mask),
                        &kept_labels,
                        gamma.unwrap_or(0.0),
                    ))
                },
                logit_x.data(),
                DEFAULT_STEP,
            )?;
            acc.record_gradient(trial_seed, &GradientComparison { analytic, numeric });
        }

        // combined: one input drives both terms through a fixed projection
        let lambda = rng.random_range(0.05..0.95);
        let proj: Vec<f64> = (0..d * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (lab, msk, w) = (labels.clone(), mask.clone(), proj.clone());
        let analytic = analytic_gradient(
            &move |t: &mut Tape, v: Var| {
                let w = t.constant(Tensor::new(vec![d, 4], w.clone())?);
                let logits = t.matmul(v, w)?;
                let config = losses::LossConfig {
                    kind: losses::LossKind::SclCombined,
                    lambda,
                    temperature: tau,
                    base_temperature: 1.0,
                    scl_reduction: SclReduction::Sum,
                    ..losses::LossConfig::default()
                };
                Ok(losses::compute_loss(t, logits, v, &lab, &msk, &config, 0)?.total)
            },
            &x,
        )?;
        let numeric = precise_central_differences(
            |p| {
                let rows = select(&rows_of(p, d), &mask);
                let logits: Vec<Vec<Dd>> = rows
                    .iter()
                    .map(|r| {
                        (0..4)
                            .map(|j| (0..d).fold(Dd::of(0.0), |s, k| s + r[k] * Dd::of(proj[k * 4 + j])))
                            .collect()
                    })
                    .collect();
                let ce = focal_reference(&logits, &kept_labels, 0.0);
                let scl = scl_reference(&rows, &kept_labels, tau)?;
                let lam = Dd::of(lambda);
                Ok((Dd::of(1.0) - lam) * ce + lam * scl)
            },
            x.data(),
            DEFAULT_STEP,
        )?;
        combined_grad.record_gradient(trial_seed, &GradientComparison { analytic, numeric });
    }

    Ok([
        scl_value,
        ce_value,
        focal_value,
        scl_grad,
        ce_grad,
        focal_grad,
        combined_grad,
    ]
    .into_iter()
    .map(|a| a.report)
    .collect())
}
