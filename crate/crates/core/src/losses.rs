//! Cross-entropy, token-level supervised contrastive loss, their weighted
//! combination, and focal loss. All losses are built from tape ops, so their
//! gradients come from the same backward rules as the encoder.

use std::cmp::Ordering;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::PunctLabel;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var, NORMALIZE_EPS};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "SCL_COMBINED")]
    SclCombined,
    #[serde(rename = "FOCAL")]
    Focal,
}

/// How `temperature` and `base_temperature` enter the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// Similarities are divided by `temperature / base_temperature`.
    Literal,
    /// Similarities are divided by `temperature`; the loss is multiplied by
    /// `temperature / base_temperature` (the common SupCon reference code).
    Supcon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SclReduction {
    /// Sum of per-anchor terms.
    Sum,
    /// Sum divided by the number of anchors that have at least one positive.
    MeanOverAnchors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda: f64,
    pub temperature: f64,
    pub base_temperature: f64,
    pub focal_gamma: f64,
    pub o_anchor_cap: Option<usize>,
    pub temperature_mode: TemperatureMode,
    pub scl_reduction: SclReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::SclCombined,
            lambda: 0.1,
            temperature: 0.6,
            base_temperature: 0.07,
            focal_gamma: 2.0,
            o_anchor_cap: None,
            temperature_mode: TemperatureMode::Literal,
            scl_reduction: SclReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::Ce,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        effective_temperature(self.temperature, self.base_temperature)?;
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal_gamma {} must be >= 0", self.focal_gamma)));
        }
        if self.o_anchor_cap == Some(0) {
            return Err(Error::Config("o_anchor_cap must be at least 1 when set".into()));
        }
        Ok(())
    }

    /// Temperature used inside the exponent and the factor applied to the
    /// contrastive loss afterwards.
    pub fn scl_scaling(&self) -> Result<(f64, f64)> {
        let ratio = effective_temperature(self.temperature, self.base_temperature)?;
        Ok(match self.temperature_mode {
            TemperatureMode::Literal => (ratio, 1.0),
            TemperatureMode::Supcon => (self.temperature, ratio),
        })
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            LossKind::Ce => "ce",
            LossKind::SclCombined => "scl",
            LossKind::Focal => "focal",
        }
    }
}

/// `temperature / base_temperature`
pub fn effective_temperature(temperature: f64, base_temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) || !(base_temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperatures must be positive, got {temperature} / {base_temperature}"
        )));
    }
    Ok(temperature / base_temperature)
}

fn valid_rows(labels: &[PunctLabel], mask: &[bool], rows: usize, op: &str) -> Result<Vec<usize>> {
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::contract(format!(
            "{op}: {rows} rows but {} labels and {} mask cells",
            labels.len(),
            mask.len()
        )));
    }
    let valid: Vec<usize> = (0..rows).filter(|&i| mask[i]).collect();
    if valid.is_empty() {
        return Err(Error::contract(format!("{op}: no mask-true tokens")));
    }
    Ok(valid)
}

/// Log-probability of the true class at each mask-true token.
fn true_class_log_probs(tape: &mut Tape, logits: Var, labels: &[PunctLabel], mask: &[bool], op: &str) -> Result<Var> {
    let classes = tape.value(logits).last_dim();
    if classes != PunctLabel::COUNT {
        return Err(Error::Dimension {
            op: "cross_entropy",
            detail: format!("expected {} classes, got {classes}", PunctLabel::COUNT),
        });
    }
    let rows = tape.value(logits).rows();
    let valid = valid_rows(labels, mask, rows, op)?;
    let log_probs = tape.log_softmax(logits)?;
    let picks = valid.iter().map(|&i| i * classes + labels[i].index()).collect();
    tape.pick(log_probs, picks)
}

/// Mean over mask-true tokens of `−log softmax(logits)[label]`.
///
/// `logits` may have any leading shape; its last dimension must be 4 and its
/// rows align with `labels` and `mask`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[PunctLabel], mask: &[bool]) -> Result<Var> {
    let lp = true_class_log_probs(tape, logits, labels, mask, "cross_entropy")?;
    let m = tape.mean(lp);
    Ok(tape.scale(m, -1.0))
}

/// Mean over mask-true tokens of `−(1 − p_t)^γ · log p_t`.
pub fn focal_loss(tape: &mut Tape, logits: Var, labels: &[PunctLabel], mask: &[bool], gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::contract(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let lp = true_class_log_probs(tape, logits, labels, mask, "focal_loss")?;
    let p = tape.exp(lp);
    let residual = tape.affine(p, -1.0, 1.0);
    let weight = tape.pow_const(residual, gamma)?;
    let weighted = tape.mul(weight, lp)?;
    let m = tape.mean(weighted);
    Ok(tape.scale(m, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SclOptions {
    /// Divisor of cosine similarities inside the exponent.
    pub tau: f64,
    /// Keep at most this many `O` tokens (chosen by `seed`).
    pub o_anchor_cap: Option<usize>,
    pub reduction: SclReduction,
    pub seed: u64,
}

impl SclOptions {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            o_anchor_cap: None,
            reduction: SclReduction::Sum,
            seed: 0,
        }
    }
}

/// Token positions that take part in the contrastive loss.
pub fn scl_positions(labels: &[PunctLabel], mask: &[bool], cap: Option<usize>, seed: u64) -> Vec<usize> {
    let valid: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
    let Some(cap) = cap else {
        return valid;
    };
    let o_positions: Vec<usize> = valid.iter().copied().filter(|&i| labels[i] == PunctLabel::O).collect();
    if o_positions.len() <= cap {
        return valid;
    }
    let mut rng = seed::rng(seed, &[0x0ca9]);
    let mut kept_o: Vec<usize> = index::sample(&mut rng, o_positions.len(), cap)
        .into_iter()
        .map(|k| o_positions[k])
        .collect();
    kept_o.sort_unstable();
    let mut out: Vec<usize> = valid
        .into_iter()
        .filter(|&i| labels[i] != PunctLabel::O)
        .chain(kept_o)
        .collect();
    out.sort_unstable();
    out
}

/// Supervised contrastive loss over every mask-true token of the batch.
///
/// With `Φ` the ℓ2-normalized rows of `reps` at the selected positions `V`,
/// each anchor `i` with positives `P(i) = {p ≠ i : y_p = y_i}` contributes
///
/// ```text
/// −1/|P(i)| · Σ_{p∈P(i)} log( exp(Φ_i·Φ_p/τ) / Σ_{k∈V\{i}} exp(Φ_i·Φ_k/τ) )
/// ```
///
/// and anchors without positives contribute nothing. The denominator is
/// evaluated as a log-sum-exp.
pub fn token_scl(tape: &mut Tape, reps: Var, labels: &[PunctLabel], mask: &[bool], opts: &SclOptions) -> Result<Var> {
    if !(opts.tau > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {}",
            opts.tau
        )));
    }
    let rows = tape.value(reps).rows();
    valid_rows(labels, mask, rows, "token_scl")?;
    let mut positions = scl_positions(labels, mask, opts.o_anchor_cap, opts.seed);
    // Canonical order (label, then row bits): the floating-point value is
    // then identical for any permutation of the tokens.
    let d = tape.value(reps).last_dim();
    let data = tape.value(reps).data();
    positions.sort_by(|&a, &b| {
        let (ra, rb) = (&data[a * d..(a + 1) * d], &data[b * d..(b + 1) * d]);
        labels[a].cmp(&labels[b]).then_with(|| {
            ra.iter()
                .zip(rb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    });
    let n = positions.len();
    let anchor_labels: Vec<PunctLabel> = positions.iter().map(|&i| labels[i]).collect();

    let gathered = tape.gather_rows(reps, positions)?;
    let phi = tape.l2_normalize_rows(gathered, NORMALIZE_EPS);
    let sim = tape.matmul_ext(phi, phi, true)?;
    let logits = tape.scale(sim, 1.0 / opts.tau);

    let mut keep = vec![true; n * n];
    for i in 0..n {
        keep[i * n + i] = false;
    }
    let log_prob = tape.masked_log_softmax(logits, keep)?;

    let mut counts = [0usize; PunctLabel::COUNT];
    for l in &anchor_labels {
        counts[l.index()] += 1;
    }
    let mut weights = vec![0.0; n * n];
    let mut anchors = 0usize;
    for (i, li) in anchor_labels.iter().enumerate() {
        let positives = counts[li.index()] - 1;
        if positives == 0 {
            continue;
        }
        anchors += 1;
        let w = -1.0 / positives as f64;
        for (p, lp) in anchor_labels.iter().enumerate() {
            if p != i && lp == li {
                weights[i * n + p] = w;
            }
        }
    }
    let weighted = tape.mul_const(log_prob, weights)?;
    let total = tape.sum(weighted);
    Ok(match opts.reduction {
        SclReduction::Sum => total,
        SclReduction::MeanOverAnchors => tape.scale(total, 1.0 / anchors.max(1) as f64),
    })
}

/// Loss graph for one batch plus the component values for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// Cross-entropy value; `None` under focal loss.
    pub ce: Option<f64>,
    /// Contrastive value; `None` when the contrastive term was not evaluated.
    pub scl: Option<f64>,
}

/// `(1 − λ)·ce + λ·scl`, returning the operand itself at either endpoint.
pub fn mix_losses(tape: &mut Tape, ce: Var, scl: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(ce);
    }
    if lambda == 1.0 {
        return Ok(scl);
    }
    let a = tape.scale(ce, 1.0 - lambda);
    let b = tape.scale(scl, lambda);
    tape.add(a, b)
}

/// `(1 − λ)·CE + λ·SCL`. At `λ = 0` the result is the cross-entropy node
/// itself and the contrastive term is never built; at `λ = 1` it is the
/// contrastive node.
pub fn combined_loss(
    tape: &mut Tape,
    logits: Var,
    reps: Var,
    labels: &[PunctLabel],
    mask: &[bool],
    config: &LossConfig,
    seed: u64,
) -> Result<LossParts> {
    config.validate()?;
    let ce = cross_entropy(tape, logits, labels, mask)?;
    let ce_value = tape.value(ce).item();
    if config.lambda == 0.0 {
        return Ok(LossParts {
            total: ce,
            ce: Some(ce_value),
            scl: None,
        });
    }
    let (tau, factor) = config.scl_scaling()?;
    let opts = SclOptions {
        tau,
        o_anchor_cap: config.o_anchor_cap,
        reduction: config.scl_reduction,
        seed,
    };
    let mut scl = token_scl(tape, reps, labels, mask, &opts)?;
    if factor != 1.0 {
        scl = tape.scale(scl, factor);
    }
    let scl_value = tape.value(scl).item();
    let total = mix_losses(tape, ce, scl, config.lambda)?;
    Ok(LossParts {
        total,
        ce: Some(ce_value),
        scl: Some(scl_value),
    })
}

/// Dispatches on `config.kind`.
pub fn compute_loss(
    tape: &mut Tape,
    logits: Var,
    reps: Var,
    labels: &[PunctLabel],
    mask: &[bool],
    config: &LossConfig,
    seed: u64,
) -> Result<LossParts> {
    config.validate()?;
    match config.kind {
        LossKind::Ce => {
            let total = cross_entropy(tape, logits, labels, mask)?;
            Ok(LossParts {
                total,
                ce: Some(tape.value(total).item()),
                scl: None,
            })
        }
        LossKind::Focal => Ok(LossParts {
            total: focal_loss(tape, logits, labels, mask, config.focal_gamma)?,
            ce: None,
            scl: None,
        }),
        LossKind::SclCombined => combined_loss(tape, logits, reps, labels, mask, config, seed),
    }
}
