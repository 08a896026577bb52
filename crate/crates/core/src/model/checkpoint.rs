use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Parameter, PunctuationModel};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const FORMAT: &str = "punctscl-checkpoint";
const VERSION: u32 = 1;

/// Self-contained model snapshot: architecture, vocabulary and weights.
/// Weights are stored as base64 little-endian `f64`, so a save/load round
/// trip is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub vocabulary: Vec<String>,
    pub min_frequency: usize,
    pub parameters: Vec<StoredTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl Checkpoint {
    pub fn capture(model: &PunctuationModel, vocab: &Vocabulary) -> Self {
        let parameters = model
            .parameters()
            .iter()
            .map(|p| {
                let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                StoredTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: STANDARD.encode(bytes),
                }
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config().clone(),
            vocabulary: vocab.tokens().to_vec(),
            min_frequency: vocab.min_frequency(),
            parameters,
        }
    }

    pub fn restore(&self) -> Result<(PunctuationModel, Vocabulary)> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let vocab = Vocabulary::from_tokens(self.vocabulary.clone(), self.min_frequency)?;
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but config says {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let params = self
            .parameters
            .iter()
            .map(|s| {
                let bytes = STANDARD
                    .decode(&s.data)
                    .map_err(|e| Error::Config(format!("parameter {}: {e}", s.name)))?;
                if bytes.len() % 8 != 0 {
                    return Err(Error::Config(format!("parameter {}: truncated data", s.name)));
                }
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Ok(Parameter {
                    name: s.name.clone(),
                    value: Tensor::new(s.shape.clone(), data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = PunctuationModel::from_parameters(self.config.clone(), params)?;
        Ok((model, vocab))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
