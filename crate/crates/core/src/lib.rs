//! Token-level supervised contrastive learning for punctuation restoration.
//!
//! The crate bundles a small `f64` autodiff engine ([`numerics`]), text
//! ingestion and synthetic corpora ([`corpus`]), a from-scratch transformer
//! encoder ([`model`]), the loss family ([`losses`]), an AdamW training loop
//! ([`training`]), scoring ([`evaluation`]) and brute-force reference
//! implementations used as test oracles ([`oracle`]).

// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod seed;
pub mod training;

pub use corpus::{Batch, LabeledToken, PunctLabel, Vocabulary};
pub use error::{Error, Result};
pub use evaluation::{EvaluationReport, Prf};
pub use losses::{LossConfig, LossKind};
pub use model::{Checkpoint, EncoderConfig, PunctuationModel};
pub use numerics::{Tape, Tensor, Var};
pub use training::{RunRecord, TrainConfig};
