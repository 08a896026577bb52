//! Precision/recall/F1 over the punctuation classes and embedding-space
//! separation statistics.
//!
//! Every ratio is computed as one division of integer counts
//! (`F1 = 2TP / (2TP + FP + FN)`), so reported values are the correctly
//! rounded `f64` of the underlying rational.

use rand::Rng;
use rayon::prelude::*;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::corpus::{Batch, PunctLabel};
use crate::error::{Error, Result};
use crate::model::{predict_labels, PunctuationModel};
use crate::numerics::{Tape, Tensor};
use crate::seed;

pub const DEFAULT_MAX_PAIRS: usize = 10_000;

/// `counts[true][predicted]` over mask-true tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ConfusionCounts {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(mut self, other: &Self) -> Self {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, x) in row.iter_mut().zip(o) {
                *c += x;
            }
        }
        self
    }

    /// `(TP, FP, FN)` for one class.
    pub fn class_counts(&self, class: PunctLabel) -> (u64, u64, u64) {
        let c = class.index();
        let tp = self.counts[c][c];
        let fp = (0..4).filter(|&t| t != c).map(|t| self.counts[t][c]).sum();
        let fn_ = (0..4).filter(|&p| p != c).map(|p| self.counts[c][p]).sum();
        (tp, fp, fn_)
    }
}

pub fn confusion(y_true: &[PunctLabel], y_pred: &[PunctLabel], mask: &[bool]) -> Result<ConfusionCounts> {
    if y_true.len() != y_pred.len() || y_true.len() != mask.len() {
        return Err(Error::contract(format!(
            "confusion inputs differ in length: {} true, {} predicted, {} mask",
            y_true.len(),
            y_pred.len(),
            mask.len()
        )));
    }
    let mut cm = ConfusionCounts::default();
    for ((t, p), &m) in y_true.iter().zip(y_pred).zip(mask) {
        if m {
            cm.counts[t.index()][p.index()] += 1;
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    /// Set when a zero denominator forced one of the values to 0.
    pub undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// P, R and F1 from raw counts, 0 (flagged) wherever a denominator is 0.
pub fn prf_from_counts(tp: u64, fp: u64, fn_: u64) -> Prf {
    let (precision, pu) = ratio(tp, tp + fp);
    let (recall, ru) = ratio(tp, tp + fn_);
    let (f1, fu) = if tp == 0 {
        (0.0, true)
    } else {
        ratio(2 * tp, 2 * tp + fp + fn_)
    };
    Prf {
        precision,
        recall,
        f1,
        undefined: pu || ru || fu,
    }
}

pub fn per_class_prf(cm: &ConfusionCounts, class: PunctLabel) -> Result<Prf> {
    if class == PunctLabel::O {
        return Err(Error::contract("O is not a scored class"));
    }
    let (tp, fp, fn_) = cm.class_counts(class);
    Ok(prf_from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// TP/FP/FN pooled over the scored classes.
    #[default]
    Micro,
    /// Unweighted mean of the per-class P, R and F1.
    Macro,
}

pub fn overall_prf(cm: &ConfusionCounts, averaging: Averaging) -> Prf {
    match averaging {
        Averaging::Micro => {
            let (tp, fp, fn_) = PunctLabel::SCORED.iter().fold((0, 0, 0), |acc, &c| {
                let (t, p, n) = cm.class_counts(c);
                (acc.0 + t, acc.1 + p, acc.2 + n)
            });
            prf_from_counts(tp, fp, fn_)
        }
        Averaging::Macro => {
            let per: Vec<Prf> = PunctLabel::SCORED
                .iter()
                .map(|&c| per_class_prf(cm, c).expect("scored class"))
                .collect();
            let n = per.len() as f64;
            Prf {
                precision: per.iter().map(|p| p.precision).sum::<f64>() / n,
                recall: per.iter().map(|p| p.recall).sum::<f64>() / n,
                f1: per.iter().map(|p| p.f1).sum::<f64>() / n,
                undefined: per.iter().any(|p| p.undefined),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub intra: f64,
    pub inter: f64,
    pub score: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

/// Mean cosine similarity of same-label pairs minus that of different-label
/// pairs.
///
/// When a side has at most `max_pairs` pairs they are all enumerated;
/// otherwise `max_pairs` pairs are drawn uniformly (with replacement) from
/// that side using `seed`.
pub fn embedding_separation(reps: &Tensor, labels: &[PunctLabel], max_pairs: usize, seed: u64) -> Result<Separation> {
    let n = reps.rows();
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{} labels for {n} representation rows",
            labels.len()
        )));
    }
    if max_pairs == 0 {
        return Err(Error::contract("max_pairs must be positive"));
    }
    let d = reps.last_dim();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row = reps.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }).collect()
        })
        .collect();
    let cos = |i: usize, j: usize| -> f64 { (0..d).map(|k| unit[i][k] * unit[j][k]).sum() };

    let mut members: [Vec<usize>; 4] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        members[l.index()].push(i);
    }
    let sizes: Vec<u64> = members.iter().map(|m| m.len() as u64).collect();

    let intra_weights: Vec<u64> = sizes.iter().map(|&s| s * s.saturating_sub(1) / 2).collect();
    let intra_total: u64 = intra_weights.iter().sum();
    if intra_total == 0 {
        return Err(Error::contract(
            "no class has two members; intra-class similarity undefined",
        ));
    }
    let mut inter_groups = Vec::new();
    for a in 0..4 {
        for b in a + 1..4 {
            inter_groups.push(((a, b), sizes[a] * sizes[b]));
        }
    }
    let inter_total: u64 = inter_groups.iter().map(|g| g.1).sum();
    if inter_total == 0 {
        return Err(Error::contract(
            "all tokens share one label; inter-class similarity undefined",
        ));
    }

    let mut rng = seed::rng(seed, &[0x5e9a]);
    let (intra_sum, intra_pairs) = if intra_total <= max_pairs as u64 {
        let mut s = 0.0;
        for m in &members {
            for (x, &i) in m.iter().enumerate() {
                for &j in &m[x + 1..] {
                    s += cos(i, j);
                }
            }
        }
        (s, intra_total as usize)
    } else {
        let mut s = 0.0;
        for _ in 0..max_pairs {
            let c = pick_weighted(&mut rng, &intra_weights, intra_total);
            let m = &members[c];
            let x = rng.random_range(0..m.len());
            let mut y = rng.random_range(0..m.len() - 1);
            if y >= x {
                y += 1;
            }
            s += cos(m[x], m[y]);
        }
        (s, max_pairs)
    };
    let (inter_sum, inter_pairs) = if inter_total <= max_pairs as u64 {
        let mut s = 0.0;
        for &((a, b), _) in &inter_groups {
            for &i in &members[a] {
                for &j in &members[b] {
                    s += cos(i, j);
                }
            }
        }
        (s, inter_total as usize)
    } else {
        let weights: Vec<u64> = inter_groups.iter().map(|g| g.1).collect();
        let mut s = 0.0;
        for _ in 0..max_pairs {
            let (a, b) = inter_groups[pick_weighted(&mut rng, &weights, inter_total)].0;
            let i = members[a][rng.random_range(0..members[a].len())];
            let j = members[b][rng.random_range(0..members[b].len())];
            s += cos(i, j);
        }
        (s, max_pairs)
    };
    let intra = intra_sum / intra_pairs as f64;
    let inter = inter_sum / inter_pairs as f64;
    Ok(Separation {
        intra,
        inter,
        score: intra - inter,
        intra_pairs,
        inter_pairs,
    })
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: &[u64], total: u64) -> usize {
    let mut r = rng.random_range(0..total);
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    unreachable!("r < total")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub per_class: [Prf; 3],
    pub overall: Prf,
    pub averaging: Averaging,
    pub confusion: ConfusionCounts,
    pub separation: Option<Separation>,
}

impl EvaluationReport {
    pub fn from_confusion(cm: ConfusionCounts, averaging: Averaging) -> Self {
        let per_class = PunctLabel::SCORED.map(|c| per_class_prf(&cm, c).expect("scored class"));
        Self {
            per_class,
            overall: overall_prf(&cm, averaging),
            averaging,
            confusion: cm,
            separation: None,
        }
    }

    pub fn class(&self, label: PunctLabel) -> Option<&Prf> {
        PunctLabel::SCORED
            .iter()
            .position(|&c| c == label)
            .map(|i| &self.per_class[i])
    }
}

impl Serialize for EvaluationReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(None)?;
        for (c, prf) in PunctLabel::SCORED.iter().zip(&self.per_class) {
            map.serialize_entry(c.as_str(), prf)?;
        }
        map.serialize_entry("OVERALL", &self.overall)?;
        map.serialize_entry("averaging", &self.averaging)?;
        map.serialize_entry("confusion", &self.confusion)?;
        if let Some(sep) = &self.separation {
            map.serialize_entry("separation", sep)?;
        }
        map.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub averaging: Averaging,
    /// Compute separation statistics with this pair cap and seed.
    pub separation: Option<(usize, u64)>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            averaging: Averaging::Micro,
            separation: None,
        }
    }
}

/// Runs the model in evaluation mode over `batches` (in parallel) and scores
/// the mask-true tokens. Separation statistics use the final encoder
/// representations.
pub fn evaluate(model: &PunctuationModel, batches: &[Batch], options: &EvalOptions) -> Result<EvaluationReport> {
    let want_reps = options.separation.is_some();
    let parts: Vec<(ConfusionCounts, Vec<f64>, Vec<PunctLabel>)> = batches
        .par_iter()
        .map(|batch| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, batch, false, 0)?;
            let preds = predict_labels(tape.value(out.logits), &batch.mask);
            let cm = confusion(&batch.labels, &preds, &batch.mask)?;
            let (mut rows, mut labels) = (Vec::new(), Vec::new());
            if want_reps {
                let reps = tape.value(out.reps);
                for (i, (&m, &l)) in batch.mask.iter().zip(&batch.labels).enumerate() {
                    if m {
                        rows.extend_from_slice(reps.row(i));
                        labels.push(l);
                    }
                }
            }
            Ok((cm, rows, labels))
        })
        .collect::<Result<_>>()?;

    let cm = parts.iter().fold(ConfusionCounts::default(), |acc, p| acc.merge(&p.0));
    let mut report = EvaluationReport::from_confusion(cm, options.averaging);
    if let Some((max_pairs, sep_seed)) = options.separation {
        let labels: Vec<PunctLabel> = parts.iter().flat_map(|p| p.2.iter().copied()).collect();
        let data: Vec<f64> = parts.into_iter().flat_map(|p| p.1).collect();
        let d = model.config().model_dim;
        let reps = Tensor::new(vec![labels.len(), d], data)?;
        report.separation = Some(embedding_separation(&reps, &labels, max_pairs, sep_seed)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use PunctLabel::*;

    fn counts(classes: [(u64, u64, u64); 3]) -> ConfusionCounts {
        // Realise the requested per-class (TP, FP, FN) with all errors
        // routed through O so the classes do not interact.
        let mut cm = ConfusionCounts::default();
        for (c, (tp, fp, fn_)) in PunctLabel::SCORED.iter().zip(classes) {
            let i = c.index();
            cm.counts[i][i] = tp;
            cm.counts[0][i] = fp;
            cm.counts[i][0] = fn_;
        }
        cm
    }

    #[test]
    fn confusion_tabulates_masked_tokens() {
        let cm = confusion(&[Comma, Period, O], &[Comma, O, Comma], &[true; 3]).unwrap();
        let mut expected = ConfusionCounts::default();
        expected.counts[1][1] = 1;
        expected.counts[2][0] = 1;
        expected.counts[0][1] = 1;
        assert_eq!(cm, expected);
        assert_eq!(cm.total(), 3);

        let cm = confusion(&[Comma, Period], &[Comma, Period], &[false, false]).unwrap();
        assert_eq!(cm, ConfusionCounts::default());

        let labels = [O, Comma, Period, Question, Question];
        let cm = confusion(&labels, &labels, &[true; 5]).unwrap();
        for t in 0..4 {
            for p in 0..4 {
                assert_eq!(cm.counts[t][p] > 0, t == p);
            }
        }
        assert!(confusion(&[O], &[O, O], &[true]).is_err());
    }

    #[test]
    fn per_class_fixtures() {
        let cm = counts([(8, 2, 2), (3, 1, 2), (0, 0, 5)]);
        let comma = per_class_prf(&cm, Comma).unwrap();
        assert_eq!((comma.precision, comma.recall, comma.f1), (0.8, 0.8, 0.8));
        assert!(!comma.undefined);

        let period = per_class_prf(&cm, Period).unwrap();
        assert_eq!(period.precision, 3.0 / 4.0);
        assert_eq!(period.recall, 3.0 / 5.0);
        assert_eq!(period.f1, 6.0 / 9.0);
        assert!((period.f1 - 0.666667).abs() < 1e-6);

        let q = per_class_prf(&cm, Question).unwrap();
        assert_eq!((q.precision, q.recall, q.f1), (0.0, 0.0, 0.0));
        assert!(q.undefined);
        assert!(per_class_prf(&cm, O).is_err());
    }

    #[test]
    fn overall_micro_fixture() {
        let cm = counts([(8, 2, 2), (9, 1, 1), (1, 0, 1)]);
        let o = overall_prf(&cm, Averaging::Micro);
        assert_eq!(o.precision, 18.0 / 21.0);
        assert_eq!(o.recall, 18.0 / 22.0);
        assert_eq!(o.f1, 36.0 / 43.0);
        assert!((o.precision - 0.857143).abs() < 1e-6);
        assert!((o.recall - 0.818182).abs() < 1e-6);
        assert!((o.f1 - 0.837209).abs() < 1e-6);

        let m = overall_prf(&cm, Averaging::Macro);
        assert!((m.precision - (0.8 + 0.9 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn overall_edge_cases() {
        let labels = [O, Comma, Period, Question];
        let perfect = confusion(&labels, &labels, &[true; 4]).unwrap();
        let o = overall_prf(&perfect, Averaging::Micro);
        assert_eq!((o.precision, o.recall, o.f1), (1.0, 1.0, 1.0));

        let all_o = confusion(&labels, &[O; 4], &[true; 4]).unwrap();
        let o = overall_prf(&all_o, Averaging::Micro);
        assert_eq!((o.precision, o.recall, o.f1), (0.0, 0.0, 0.0));

        // only one scored class active → overall equals that class
        let cm = counts([(0, 0, 0), (5, 3, 4), (0, 0, 0)]);
        let o = overall_prf(&cm, Averaging::Micro);
        assert_eq!(
            o,
            Prf {
                undefined: false,
                ..per_class_prf(&cm, Period).unwrap()
            }
        );
    }

    #[test]
    fn cross_class_errors_count_on_both_sides() {
        // true COMMA predicted PERIOD: FN for COMMA and FP for PERIOD
        let cm = confusion(&[Comma], &[Period], &[true]).unwrap();
        assert_eq!(cm.class_counts(Comma), (0, 0, 1));
        assert_eq!(cm.class_counts(Period), (0, 1, 0));
        let o = overall_prf(&cm, Averaging::Micro);
        assert_eq!((o.precision, o.recall), (0.0, 0.0));
    }

    #[test]
    fn separation_fixtures() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = embedding_separation(&a, &[Comma, Comma, Period, Period], 100, 0).unwrap();
        assert_eq!((s.intra, s.inter, s.score), (1.0, 0.0, 1.0));

        let same = Tensor::from_rows(&vec![vec![0.3, 0.4]; 4]).unwrap();
        let s = embedding_separation(&same, &[Comma, Comma, Period, Period], 100, 0).unwrap();
        assert!((s.intra - 1.0).abs() < 1e-15 && (s.inter - 1.0).abs() < 1e-15);
        assert!(s.score.abs() < 1e-15);

        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.8, 0.6], vec![-1.0, 0.0], vec![-0.8, 0.6]]).unwrap();
        let s = embedding_separation(&x, &[Comma, Comma, Period, Period], 100, 0).unwrap();
        // inter pairs: (1,0)·(−1,0) = −1, (1,0)·(−0.8,0.6) = −0.8,
        // (0.8,0.6)·(−1,0) = −0.8, (0.8,0.6)·(−0.8,0.6) = −0.28
        assert!((s.intra - 0.8).abs() < 1e-12, "{s:?}");
        assert!((s.inter + 0.72).abs() < 1e-12, "{s:?}");
        assert!((s.score - 1.52).abs() < 1e-12, "{s:?}");
    }

    #[test]
    fn separation_errors() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(embedding_separation(&x, &[Comma, Period], 10, 0).is_err());
        assert!(embedding_separation(&x, &[Comma, Comma], 10, 0).is_err());
        assert!(embedding_separation(&x, &[Comma], 10, 0).is_err());
    }

    #[test]
    fn sampled_separation_is_deterministic_and_close() {
        let mut rng = seed::rng(3, &[]);
        let labels: Vec<PunctLabel> = (0..300).map(|i| PunctLabel::from_index(i % 4).unwrap()).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|l| {
                let base = l.index() as f64;
                vec![
                    base.cos() + rng.random::<f64>() * 0.3,
                    base.sin() + rng.random::<f64>() * 0.3,
                    0.1,
                ]
            })
            .collect();
        let r = Tensor::from_rows(&rows).unwrap();
        let exact = embedding_separation(&r, &labels, usize::MAX, 0).unwrap();
        let a = embedding_separation(&r, &labels, 5000, 9).unwrap();
        let b = embedding_separation(&r, &labels, 5000, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.intra_pairs, 5000);
        assert!((a.score - exact.score).abs() < 0.05, "{a:?} vs {exact:?}");
    }

    #[test]
    fn report_json_layout() {
        let cm = counts([(8, 2, 2), (9, 1, 1), (1, 0, 1)]);
        let v = serde_json::to_value(EvaluationReport::from_confusion(cm, Averaging::Micro)).unwrap();
        for key in ["COMMA", "PERIOD", "QUESTION", "OVERALL"] {
            assert!(v[key]["P"].is_f64() && v[key]["R"].is_f64() && v[key]["F1"].is_f64());
        }
        assert_eq!(v["confusion"][1][1], 8);
        assert!(v.get("separation").is_none());
    }
}
