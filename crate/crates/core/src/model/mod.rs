//! Small post-layer-norm transformer encoder with a single linear
//! classification head.
//!
//! ```text
//! ids ─► token emb + position emb ─► LN ─► dropout
//!     ─► [ self-attention ─► add & LN ─► FFN(GELU) ─► add & LN ] × n_layers ─► R
//! R ─► dropout ─► linear(d → 4) ─► logits
//! ```

mod checkpoint;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;

use crate::corpus::{Batch, PunctLabel};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::seed;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Filled from the vocabulary when left at 0 in a config file.
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            max_len: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        parameter_shapes(self)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

fn parameter_layout(c: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (c.model_dim, c.ffn_dim);
    let mut out = vec![
        ("embed.token".to_string(), vec![c.vocab_size, d], Init::Normal),
        ("embed.position".to_string(), vec![c.max_len, d], Init::Normal),
        ("embed.ln.gain".to_string(), vec![d], Init::Ones),
        ("embed.ln.bias".to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        for proj in ["query", "key", "value", "output"] {
            out.push((p(&format!("attn.{proj}.weight")), vec![d, d], Init::Normal));
            out.push((p(&format!("attn.{proj}.bias")), vec![d], Init::Zeros));
        }
        out.push((p("ln1.gain"), vec![d], Init::Ones));
        out.push((p("ln1.bias"), vec![d], Init::Zeros));
        out.push((p("ffn.in.weight"), vec![d, f], Init::Normal));
        out.push((p("ffn.in.bias"), vec![f], Init::Zeros));
        out.push((p("ffn.out.weight"), vec![f, d], Init::Normal));
        out.push((p("ffn.out.bias"), vec![d], Init::Zeros));
        out.push((p("ln2.gain"), vec![d], Init::Ones));
        out.push((p("ln2.bias"), vec![d], Init::Zeros));
    }
    out.push(("classifier.weight".into(), vec![d, PunctLabel::COUNT], Init::Normal));
    out.push(("classifier.bias".into(), vec![PunctLabel::COUNT], Init::Zeros));
    out
}

fn parameter_shapes(c: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    parameter_layout(c).into_iter().map(|(n, s, _)| (n, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PunctuationModel {
    config: EncoderConfig,
    params: Vec<Parameter>,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Tape handles of the parameters, in [`PunctuationModel::parameters`] order.
    pub params: Vec<Var>,
    /// Final encoder-block output, `[B × T × d]`.
    pub reps: Var,
    /// `[B × T × 4]`
    pub logits: Var,
}

struct Params<'a> {
    vars: &'a [Var],
    cursor: usize,
}

impl Params<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.cursor];
        self.cursor += 1;
        v
    }
}

impl PunctuationModel {
    pub fn init(config: EncoderConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed, &[0x1417]);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = parameter_layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Normal => {
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                        Tensor::new(shape, data)
                    }
                    Init::Ones => Ok(Tensor::ones(&shape)),
                    Init::Zeros => Ok(Tensor::zeros(&shape)),
                }?;
                Ok(Parameter { name, value })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    /// Reassembles a model from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_parameters(config: EncoderConfig, params: Vec<Parameter>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_shapes(&config);
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Runs the encoder and classifier on `batch`.
    ///
    /// Dropout is applied only in `train_mode`, with masks drawn from `seed`.
    /// Attention weights on mask-false key positions are exactly zero.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, train_mode: bool, seed: u64) -> Result<ForwardOutput> {
        let c = &self.config;
        let (b, t, d, h) = (batch.rows(), batch.seq_len(), c.model_dim, c.n_heads);
        if t > c.max_len {
            return Err(Error::contract(format!(
                "sequence length {t} exceeds max_len {}",
                c.max_len
            )));
        }
        if let Some(&bad) = batch.token_ids.iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        let dropout = if train_mode { c.dropout } else { 0.0 };
        let mut rng = seed::rng(seed, &[0xd409]);

        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let mut p = Params { vars: &vars, cursor: 0 };

        let token_table = p.next();
        let position_table = p.next();
        let tok = tape.embedding(token_table, batch.token_ids.clone())?;
        let positions = (0..b).flat_map(|_| 0..t).collect();
        let pos = tape.embedding(position_table, positions)?;
        let mut x = tape.add(tok, pos)?;
        let (g, bb) = (p.next(), p.next());
        x = tape.layer_norm(x, g, bb, LN_EPS)?;
        x = tape.dropout(x, dropout, &mut rng)?;

        let keep: Vec<bool> = (0..b)
            .flat_map(|bi| {
                let row = &batch.mask[bi * t..(bi + 1) * t];
                std::iter::repeat_n(row, h * t).flatten().copied()
            })
            .collect();
        let scale = 1.0 / ((d / h) as f64).sqrt();

        for _ in 0..c.n_layers {
            let mut proj = |tape: &mut Tape, x: Var| -> Result<Var> {
                let (w, bias) = (p.next(), p.next());
                let y = tape.matmul(x, w)?;
                tape.add_bias(y, bias)
            };
            let q = proj(tape, x)?;
            let k = proj(tape, x)?;
            let v = proj(tape, x)?;
            let q = tape.split_heads(q, b, t, h)?;
            let k = tape.split_heads(k, b, t, h)?;
            let v = tape.split_heads(v, b, t, h)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax(scores, keep.clone())?;
            let ctx = tape.batch_matmul(attn, v, false)?;
            let ctx = tape.merge_heads(ctx, b, t, h)?;
            let out = proj(tape, ctx)?;
            let out = tape.dropout(out, dropout, &mut rng)?;
            let res = tape.add(x, out)?;
            let (g1, b1) = (p.next(), p.next());
            x = tape.layer_norm(res, g1, b1, LN_EPS)?;

            let (w_in, b_in, w_out, b_out) = (p.next(), p.next(), p.next(), p.next());
            let hidden = tape.matmul(x, w_in)?;
            let hidden = tape.add_bias(hidden, b_in)?;
            let hidden = tape.gelu(hidden);
            let ff = tape.matmul(hidden, w_out)?;
            let ff = tape.add_bias(ff, b_out)?;
            let ff = tape.dropout(ff, dropout, &mut rng)?;
            let res = tape.add(x, ff)?;
            let (g2, b2) = (p.next(), p.next());
            x = tape.layer_norm(res, g2, b2, LN_EPS)?;
        }

        let reps = tape.reshape(x, vec![b, t, d])?;
        let head_in = tape.dropout(x, dropout, &mut rng)?;
        let (w, bias) = (p.next(), p.next());
        let logits = tape.matmul(head_in, w)?;
        let logits = tape.add_bias(logits, bias)?;
        let logits = tape.reshape(logits, vec![b, t, PunctLabel::COUNT])?;
        debug_assert_eq!(p.cursor, vars.len());
        Ok(ForwardOutput {
            params: vars,
            reps,
            logits,
        })
    }
}

/// Argmax over classes at every cell; ties go to the lower class index.
/// Mask-false cells are reported as `O`.
pub fn predict_labels(logits: &Tensor, mask: &[bool]) -> Vec<PunctLabel> {
    logits
        .data()
        .chunks(logits.last_dim())
        .zip(mask)
        .map(|(row, &valid)| {
            if !valid {
                return PunctLabel::O;
            }
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            PunctLabel::from_index(best).unwrap_or(PunctLabel::O)
        })
        .collect()
}
