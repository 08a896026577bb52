//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are appended to a [`Tape`] in execution order and return a
//! [`Var`] handle. [`Tape::backward`] walks the record in reverse and
//! accumulates gradients for every node that depends on a trainable leaf.
//!
//! ```
//! use punctscl::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let s = tape.sum(x);
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
//! ```

use rand::Rng;
use rayon::prelude::*;

use super::kernels::{accumulate, compensated_sum, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default floor used by [`Tape::l2_normalize_rows`] for degenerate rows.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
    Exp(Var),
    PowConst {
        x: Var,
        power: f64,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        keep: Option<Vec<bool>>,
    },
    LogSoftmax {
        x: Var,
        keep: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) target with
    /// respect to `v`, if `v` lies on a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`, or `a · bᵀ` for `b[n×k]` when `trans_b` is set.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Shape {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch());
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = if trans_b {
            gemm_nt(av, bv, m, k, n)
        } else {
            gemm_nn(av, bv, m, k, n)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// Batched product over the leading dimension of two rank-3 tensors.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Shape {
            op: "batch_matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(mismatch());
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(gi, o)| {
            let ai = &av[gi * m * k..(gi + 1) * m * k];
            let bi = &bv[gi * k * n..(gi + 1) * k * n];
            let r = if trans_b {
                gemm_nt(ai, bi, m, k, n)
            } else {
                gemm_nn(ai, bi, m, k, n)
            };
            o.copy_from_slice(&r);
        });
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    /// Adds a rank-1 `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            accumulate(row, b);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, bias }, rg))
    }

    /// `scale · x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Element-wise product with a fixed array of the same length.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "mul_const",
                left: self.shape(x).to_vec(),
                right: vec![factor.len()],
            });
        }
        let out = self.value(x).data().iter().zip(&factor).map(|(v, f)| v * f).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulConst { x, factor }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Exp(x), rg)
    }

    /// `x^power` for non-negative `x`.
    pub fn pow_const(&mut self, x: Var, power: f64) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("pow_const requires non-negative input"));
        }
        let out = self.value(x).data().iter().map(|v| v.powf(power)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::PowConst { x, power }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), rg)
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None, false)
    }

    /// Log-softmax over the last dimension, evaluated as `x − logsumexp(x)`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None, true)
    }

    /// Softmax restricted to entries where `keep` is true. Excluded entries
    /// output exactly 0 and receive no gradient; a row with nothing kept is
    /// all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        self.softmax_impl(x, Some(keep), false)
    }

    /// Log-softmax restricted to kept entries; excluded entries output 0.
    pub fn masked_log_softmax(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        self.softmax_impl(x, Some(keep), true)
    }

    fn softmax_impl(&mut self, x: Var, keep: Option<Vec<bool>>, log: bool) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if let Some(k) = &keep {
            if k.len() != t.len() {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    left: t.shape().to_vec(),
                    right: vec![k.len()],
                });
            }
        }
        let mut out = vec![0.0; t.len()];
        let src = t.data();
        out.par_chunks_mut(n).enumerate().for_each(|(r, o)| {
            let row = &src[r * n..(r + 1) * n];
            let kept = |j: usize| keep.as_ref().is_none_or(|k| k[r * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return;
            }
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if kept(j) {
                    let e = (v - max).exp();
                    o[j] = e;
                    denom += e;
                }
            }
            let lse = max + denom.ln();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) {
                    o[j] = if log { v - lse } else { o[j] / denom };
                }
            }
        });
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        let op = if log {
            Op::LogSoftmax { x, keep }
        } else {
            Op::Softmax { x, keep }
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x).data();
        let rows = src.len() / n;
        let mut out = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        out.par_chunks_mut(n)
            .zip(rstd.par_iter_mut())
            .enumerate()
            .for_each(|(r, (o, rs))| {
                let row = &src[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                *rs = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    o[j] = (row[j] - mean) * *rs * g[j] + b[j];
                }
            });
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, rstd },
            rg,
        ))
    }

    /// Selects rows of `x` (viewed as `[rows × last_dim]`); used both for
    /// embedding lookup and for collecting valid token positions.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let total = t.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {total} rows"
            )));
        }
        if rows.is_empty() {
            return Err(Error::contract("gather_rows: empty index list"));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            out.extend_from_slice(t.row(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), n], out),
            Op::GatherRows { x, rows },
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Picks individual elements by flat index into a rank-1 result.
    pub fn pick(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= t.len()) {
            return Err(Error::contract("pick: index list empty or out of range"));
        }
        let out = indices.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], out),
            Op::Pick { x, indices },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm. Rows with norm below `eps`
    /// are scaled by `1/eps` instead.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let norms: Vec<f64> = t.data().chunks(n).map(|row| dot(row, row).sqrt().max(eps)).collect();
        let mut out = t.data().to_vec();
        for (row, &nrm) in out.chunks_mut(n).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, eps, norms }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = compensated_sum(self.value(x).data());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = compensated_sum(t.data()) / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[batch·seq × heads·dh]` → `[batch·heads × seq × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if t.len() != batch * seq * d || !d.is_multiple_of(heads) {
            return Err(Error::Dimension {
                op: "split_heads",
                detail: format!("shape {:?} vs batch {batch} seq {seq} heads {heads}", t.shape()),
            });
        }
        let out = permute_heads(t.data(), batch, seq, heads, d / heads, true);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch * heads, seq, d / heads], out),
            Op::SplitHeads { x, batch, seq, heads },
            rg,
        ))
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        let dh = t.last_dim();
        if t.len() != batch * heads * seq * dh {
            return Err(Error::Dimension {
                op: "merge_heads",
                detail: format!("shape {:?} vs batch {batch} seq {seq} heads {heads}", t.shape()),
            });
        }
        let out = permute_heads(t.data(), batch, seq, heads, dh, false);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch * seq, heads * dh], out),
            Op::MergeHeads { x, batch, seq, heads },
            rg,
        ))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales
    /// the survivors by `1/(1−p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let factor = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, factor)
    }

    /// Runs reverse accumulation from a scalar `loss`.
    ///
    /// Gradients from any earlier call are discarded first, so repeated
    /// calls on the same tape yield identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(upstream) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &upstream);
            self.grads[id] = Some(upstream);
        }
        Ok(())
    }

    fn send(&mut self, target: Var, contribution: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(g) => accumulate(g, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, id: usize, dy: &[f64]) {
        let node = &self.nodes[id];
        let mut out: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if self.wants(a) {
                    let da = if trans_b {
                        gemm_nn(dy, bv.data(), m, n, k)
                    } else {
                        gemm_nt(dy, bv.data(), m, n, k)
                    };
                    out.push((a, da));
                }
                if self.wants(b) {
                    let db = if trans_b {
                        gemm_tn(dy, av.data(), m, n, k)
                    } else {
                        gemm_tn(av.data(), dy, m, k, n)
                    };
                    out.push((b, db));
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (g, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (av.data(), bv.data());
                if self.wants(a) {
                    let mut da = vec![0.0; g * m * k];
                    da.par_chunks_mut(m * k).enumerate().for_each(|(gi, o)| {
                        let dyi = &dy[gi * m * n..(gi + 1) * m * n];
                        let bi = &bd[gi * k * n..(gi + 1) * k * n];
                        let r = if trans_b {
                            gemm_nn(dyi, bi, m, n, k)
                        } else {
                            gemm_nt(dyi, bi, m, n, k)
                        };
                        o.copy_from_slice(&r);
                    });
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; g * k * n];
                    db.par_chunks_mut(k * n).enumerate().for_each(|(gi, o)| {
                        let dyi = &dy[gi * m * n..(gi + 1) * m * n];
                        let ai = &ad[gi * m * k..(gi + 1) * m * k];
                        let r = if trans_b {
                            gemm_tn(dyi, ai, m, n, k)
                        } else {
                            gemm_tn(ai, dyi, m, k, n)
                        };
                        o.copy_from_slice(&r);
                    });
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, dy.to_vec()));
                out.push((b, dy.to_vec()));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                out.push((a, dy.iter().zip(bv).map(|(d, y)| d * y).collect()));
                out.push((b, dy.iter().zip(av).map(|(d, x)| d * x).collect()));
            }
            &Op::AddBias { x, bias } => {
                let n = self.value(bias).len();
                let mut db = vec![0.0; n];
                for row in dy.chunks(n) {
                    accumulate(&mut db, row);
                }
                out.push((x, dy.to_vec()));
                out.push((bias, db));
            }
            &Op::Affine { x, scale } => {
                out.push((x, dy.iter().map(|d| d * scale).collect()));
            }
            Op::MulConst { x, factor } => {
                out.push((*x, dy.iter().zip(factor).map(|(d, f)| d * f).collect()));
            }
            &Op::Exp(x) => {
                let y = node.value.data();
                out.push((x, dy.iter().zip(y).map(|(d, y)| d * y).collect()));
            }
            &Op::PowConst { x, power } => {
                let xv = self.value(x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(d, &v)| {
                        if power == 0.0 || (v == 0.0 && power < 1.0) {
                            0.0
                        } else {
                            d * power * v.powf(power - 1.0)
                        }
                    })
                    .collect();
                out.push((x, dx));
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                out.push((x, dy.iter().zip(xv).map(|(d, &v)| d * gelu_grad(v)).collect()));
            }
            Op::Softmax { x, keep } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                dx.par_chunks_mut(n).enumerate().for_each(|(r, o)| {
                    let yr = &y[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let inner = dot(yr, dr);
                    for j in 0..n {
                        if keep.as_ref().is_none_or(|k| k[r * n + j]) {
                            o[j] = yr[j] * (dr[j] - inner);
                        }
                    }
                });
                out.push((*x, dx));
            }
            Op::LogSoftmax { x, keep } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                dx.par_chunks_mut(n).enumerate().for_each(|(r, o)| {
                    let kept = |j: usize| keep.as_ref().is_none_or(|k| k[r * n + j]);
                    let dr = &dy[r * n..(r + 1) * n];
                    let total: f64 = (0..n).filter(|&j| kept(j)).map(|j| dr[j]).sum();
                    for j in 0..n {
                        if kept(j) {
                            o[j] = dr[j] - y[r * n + j].exp() * total;
                        }
                    }
                });
                out.push((*x, dx));
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = self.value(x).data();
                let g = self.value(gain).data();
                let n = g.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for (r, o) in dx.chunks_mut(n).enumerate() {
                    let row = &xv[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd[r];
                        dxhat[j] = dr[j] * g[j];
                        dg[j] += dr[j] * xhat[j];
                        db[j] += dr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dot(&dxhat, &xhat) / n as f64;
                    for j in 0..n {
                        o[j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                out.push((x, dx));
                out.push((gain, dg));
                out.push((bias, db));
            }
            Op::GatherRows { x, rows } => {
                let src = self.value(*x);
                let n = src.last_dim();
                let mut dx = vec![0.0; src.len()];
                for (i, &r) in rows.iter().enumerate() {
                    accumulate(&mut dx[r * n..(r + 1) * n], &dy[i * n..(i + 1) * n]);
                }
                out.push((*x, dx));
            }
            Op::Pick { x, indices } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (d, &i) in dy.iter().zip(indices) {
                    dx[i] += d;
                }
                out.push((*x, dx));
            }
            Op::L2Normalize { x, eps, norms } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for (r, o) in dx.chunks_mut(n).enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let dr = &dy[r * n..(r + 1) * n];
                    let nrm = norms[r];
                    // below the floor the op is linear: x / eps
                    if nrm <= *eps {
                        for j in 0..n {
                            o[j] = dr[j] / eps;
                        }
                    } else {
                        let inner = dot(yr, dr);
                        for j in 0..n {
                            o[j] = (dr[j] - yr[j] * inner) / nrm;
                        }
                    }
                }
                out.push((*x, dx));
            }
            &Op::Sum(x) => {
                out.push((x, vec![dy[0]; self.value(x).len()]));
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                out.push((x, vec![dy[0] / n as f64; n]));
            }
            &Op::Reshape(x) => out.push((x, dy.to_vec())),
            &Op::SplitHeads { x, batch, seq, heads } => {
                let dh = node.value.last_dim();
                out.push((x, permute_heads(dy, batch, seq, heads, dh, false)));
            }
            &Op::MergeHeads { x, batch, seq, heads } => {
                let dh = node.value.last_dim() / heads;
                out.push((x, permute_heads(dy, batch, seq, heads, dh, true)));
            }
        }
        for (target, g) in out {
            self.send(target, g);
        }
    }
}

/// Moves data between `[b, t, h, dh]` and `[b, h, t, dh]` layouts.
fn permute_heads(src: &[f64], batch: usize, seq: usize, heads: usize, dh: usize, split: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let merged = ((b * seq + t) * heads + h) * dh;
                let split_at = ((b * heads + h) * seq + t) * dh;
                let (from, to) = if split { (merged, split_at) } else { (split_at, merged) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
