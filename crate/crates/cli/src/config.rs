use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use punctscl::corpus::{generate_synthetic_corpus, LabeledToken, DEFAULT_RATIOS};
use punctscl::model::EncoderConfig;
use punctscl::training::TrainConfig;
use punctscl::LossConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Running text; punctuation marks become labels.
    Plain,
    /// `token<TAB>label` lines.
    #[default]
    Tsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Training split size in tokens.
    pub n_tokens: usize,
    /// Defaults to `n_tokens / 5`.
    pub valid_tokens: Option<usize>,
    /// Defaults to `n_tokens / 5`.
    pub test_tokens: Option<usize>,
    pub ratios: [f64; 4],
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_tokens: 50_000,
            valid_tokens: None,
            test_tokens: None,
            ratios: DEFAULT_RATIOS,
            seed: 0,
        }
    }
}

pub struct Splits {
    pub train: Vec<LabeledToken>,
    pub valid: Vec<LabeledToken>,
    pub test: Vec<LabeledToken>,
}

impl SynthSection {
    /// Generates the three splits, each from its own stream of `seed`.
    pub fn generate(&self) -> Result<Splits> {
        let sizes = [
            self.n_tokens,
            self.valid_tokens.unwrap_or(self.n_tokens / 5),
            self.test_tokens.unwrap_or(self.n_tokens / 5),
        ];
        let mut splits = Vec::with_capacity(3);
        for (i, (name, n)) in ["train", "valid", "test"].into_iter().zip(sizes).enumerate() {
            let seed = punctscl::seed::derive(self.seed, &[i as u64]);
            splits
                .push(generate_synthetic_corpus(n, seed, self.ratios).with_context(|| format!("synth {name} split"))?);
        }
        let test = splits.pop().unwrap();
        let valid = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Splits { train, valid, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub format: DataFormat,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Used when no `train` path is given.
    pub synth: Option<SynthSection>,
    /// Words seen fewer times in the training split map to `<unk>`.
    pub min_frequency: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            format: DataFormat::Tsv,
            train: None,
            valid: None,
            test: None,
            synth: None,
            min_frequency: 1,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    model: EncoderConfig,
    #[serde(default)]
    train: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    loss: LossConfig,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

/// Parsed run configuration. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub model: EncoderConfig,
    /// Optimizer settings; `train.loss` carries the top-level `loss` section.
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)?;
        if raw.train.contains_key("loss") {
            bail!("loss settings belong in the top-level \"loss\" section, not under \"train\"");
        }
        let mut train: TrainConfig =
            serde_json::from_value(serde_json::Value::Object(raw.train)).context("section \"train\"")?;
        train.loss = raw.loss;
        train.validate()?;

        let resolve = |p: Option<PathBuf>| p.map(|p| base.join(p));
        let mut data = raw.data;
        data.train = resolve(data.train);
        data.valid = resolve(data.valid);
        data.test = resolve(data.test);
        let output_dir = base.join(raw.output_dir.unwrap_or_else(|| "runs".into()));
        Ok(Self {
            data,
            model: raw.model,
            train,
            output_dir,
        })
    }
}

pub fn read_corpus(path: &Path, format: DataFormat) -> Result<Vec<LabeledToken>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(match format {
        DataFormat::Plain => punctscl::corpus::parse_plain_text(&text),
        DataFormat::Tsv => punctscl::corpus::parse_tsv(&text).with_context(|| format!("parsing {}", path.display()))?,
    })
}
