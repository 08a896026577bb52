//! Batch commands behind the `punctscl` binary: `prepare`, `synth`,
//! `train`, `eval` and `gradcheck`.
//!
//! Every command writes its machine-readable result as JSON to the given
//! writer (stdout in the binary); the shapes are described by the schemas
//! in `schemas/`.

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use punctscl::corpus::{batchify, build_vocabulary, label_histogram, to_tsv, LabeledToken};
use punctscl::evaluation::{evaluate, Averaging, EvalOptions, DEFAULT_MAX_PAIRS};
use punctscl::oracle::{run_oracle_suite, Fault, OracleReport, SuiteOptions};
use punctscl::training::train_with_observer;
use punctscl::{Checkpoint, EncoderConfig, EvaluationReport, PunctuationModel, RunRecord};
use serde::Serialize;

pub use config::{read_corpus, DataFormat, DataSection, RunConfigFile, Splits, SynthSection};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PUNCTSCL_THREADS";
/// Batch size used when evaluating a checkpoint.
pub const EVAL_BATCH_SIZE: usize = 16;

#[derive(Debug, Parser)]
#[command(
    name = "punctscl",
    version,
    about = "Punctuation restoration with token-level supervised contrastive learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a text or TSV file into canonical `token<TAB>label` lines.
    Prepare {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "plain")]
        format: DataFormat,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Write synthetic train/valid/test TSVs to the configured output_dir.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Overrides data.synth.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes a checkpoint and a run record.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on labelled data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test file; defaults to data.test from --config, else its synthetic test split.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<DataFormat>,
        /// Add embedding-separation statistics to the report.
        #[arg(long)]
        diagnose: bool,
        #[arg(long, value_enum, default_value = "micro")]
        averaging: AveragingArg,
        /// Pair-sampling seed for --diagnose.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_PAIRS)]
        max_pairs: usize,
    },
    /// Compare the losses and their gradients against brute-force references.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        /// Flip the sign of the analytic contrastive gradient (the suite
        /// must then fail).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum AveragingArg {
    Micro,
    Macro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Micro => Averaging::Micro,
            AveragingArg::Macro => Averaging::Macro,
        }
    }
}

/// Parses `args` and runs the command. Usage errors exit with clap's code
/// (2), failed commands with 1.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    configure_threads()?;
    match command {
        Command::Prepare { input, format, output } => cmd_prepare(&input, format, &output, out),
        Command::Synth { config, seed } => {
            let mut config = RunConfigFile::load(&config)?;
            if let Some(seed) = seed {
                config.data.synth.get_or_insert_with(SynthSection::default).seed = seed;
            }
            cmd_synth(&config, out)
        }
        Command::Train { config, seed } => {
            let mut config = RunConfigFile::load(&config)?;
            if let Some(seed) = seed {
                config.train.seed = seed;
            }
            cmd_train(&config, out).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            test,
            config,
            format,
            diagnose,
            averaging,
            seed,
            max_pairs,
        } => {
            let config = config.map(|c| RunConfigFile::load(&c)).transpose()?;
            let options = EvalOptions {
                averaging: averaging.into(),
                separation: diagnose.then_some((max_pairs, seed)),
            };
            let format = format.or(config.as_ref().map(|c| c.data.format)).unwrap_or_default();
            let test = test.or_else(|| config.as_ref().and_then(|c| c.data.test.clone()));
            let tokens = match (test, config.as_ref().and_then(|c| c.data.synth.as_ref())) {
                (Some(path), _) => read_corpus(&path, format)?,
                // same split the training run saw, regenerated from the seed
                (None, Some(synth)) => synth.generate()?.test,
                (None, None) => bail!("no test data: pass --test, or set data.test or data.synth in --config"),
            };
            cmd_eval_tokens(&checkpoint, &tokens, &options, out).map(|_| ())
        }
        Command::Gradcheck {
            seed,
            trials,
            inject_fault,
        } => {
            let fault = inject_fault.then_some(Fault::NegateSclGradient);
            cmd_gradcheck(seed, trials as usize, fault, out).map(|_| ())
        }
    }
}

/// Sizes rayon's global pool from [`THREADS_ENV`] when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| anyhow!("{THREADS_ENV}={v:?} is not a positive integer"))?;
    // a pool that already exists (repeated calls in one process) is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn write_json(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Reads `input`, writes the canonical TSV to `output` and prints the label
/// histogram.
pub fn cmd_prepare(input: &Path, format: DataFormat, output: &Path, out: &mut dyn Write) -> Result<()> {
    let tokens = read_corpus(input, format)?;
    write_file(output, to_tsv(&tokens).as_bytes())?;
    write_json(out, &label_histogram(&tokens))
}

/// Writes `train.tsv`, `valid.tsv` and `test.tsv` to the output directory
/// and prints one histogram per split.
pub fn cmd_synth(config: &RunConfigFile, out: &mut dyn Write) -> Result<()> {
    let synth = config
        .data
        .synth
        .as_ref()
        .ok_or_else(|| anyhow!("config has no data.synth section"))?;
    let splits = synth.generate()?;
    let mut histograms = serde_json::Map::new();
    for (name, tokens) in [
        ("train", &splits.train),
        ("valid", &splits.valid),
        ("test", &splits.test),
    ] {
        write_file(
            &config.output_dir.join(format!("{name}.tsv")),
            to_tsv(tokens).as_bytes(),
        )?;
        histograms.insert(name.into(), serde_json::to_value(label_histogram(tokens))?);
    }
    write_json(out, &histograms)
}

/// Loads the train/valid splits named by `data`, or generates them from
/// `data.synth` when no training path is set.
pub fn load_splits(data: &DataSection) -> Result<Splits> {
    match (&data.train, &data.synth) {
        (Some(train), _) => {
            let valid = data
                .valid
                .as_ref()
                .ok_or_else(|| anyhow!("data.valid is required alongside data.train"))?;
            Ok(Splits {
                train: read_corpus(train, data.format)?,
                valid: read_corpus(valid, data.format)?,
                test: match &data.test {
                    Some(p) => read_corpus(p, data.format)?,
                    None => Vec::new(),
                },
            })
        }
        (None, Some(synth)) => synth.generate(),
        (None, None) => bail!("no training data: set data.train or data.synth"),
    }
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub run_record: PathBuf,
    pub record: RunRecord,
}

/// File stem shared by a run's checkpoint and record, e.g. `seed3-scl`.
pub fn run_stem(record_seed: u64, loss_label: &str) -> String {
    format!("seed{record_seed}-{loss_label}")
}

/// Trains on the configured data, prints one line per epoch and writes
/// `model-<stem>.json` and `run-<stem>.json` to the output directory.
pub fn cmd_train(config: &RunConfigFile, out: &mut dyn Write) -> Result<TrainOutputs> {
    let splits = load_splits(&config.data)?;
    if splits.train.is_empty() || splits.valid.is_empty() {
        bail!("training and validation data must be non-empty");
    }
    let vocab = build_vocabulary(&splits.train, config.data.min_frequency)?;
    if config.model.vocab_size != 0 && config.model.vocab_size != vocab.len() {
        bail!(
            "model.vocab_size is {} but the training data yields {} entries; leave it at 0",
            config.model.vocab_size,
            vocab.len()
        );
    }
    let model_config = EncoderConfig {
        vocab_size: vocab.len(),
        ..config.model.clone()
    };
    let tc = &config.train;
    if tc.max_len > model_config.max_len {
        bail!(
            "train.max_len {} exceeds model.max_len {}",
            tc.max_len,
            model_config.max_len
        );
    }
    let train_batches = batchify(&splits.train, &vocab, tc.max_len, tc.batch_size, None)?;
    let valid_batches = batchify(&splits.valid, &vocab, tc.max_len, tc.batch_size, None)?;
    let model = PunctuationModel::init(model_config, tc.seed)?;

    let mut io_error = None;
    let (best, record) = train_with_observer(model, &train_batches, &valid_batches, tc, |e| {
        let part = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        let line = writeln!(
            out,
            "epoch {:>3}  loss {:.6}  ce {}  scl {}  valid_f1 {:.4}",
            e.epoch,
            e.train_loss.total,
            part(e.train_loss.ce),
            part(e.train_loss.scl),
            e.valid_f1
        );
        if let Err(err) = line {
            io_error.get_or_insert(err);
        }
    })
    .context("training failed")?;
    if let Some(err) = io_error {
        return Err(err.into());
    }

    let stem = run_stem(tc.seed, tc.loss.label());
    let checkpoint = config.output_dir.join(format!("model-{stem}.json"));
    let run_record = config.output_dir.join(format!("run-{stem}.json"));
    fs::create_dir_all(&config.output_dir).with_context(|| format!("creating {}", config.output_dir.display()))?;
    Checkpoint::capture(&best, &vocab).save(&checkpoint)?;
    let mut json = serde_json::to_vec_pretty(&record)?;
    json.push(b'\n');
    write_file(&run_record, &json)?;
    writeln!(
        out,
        "best epoch {} (valid_f1 {:.4}); wrote {} and {}",
        record.best_epoch,
        record.best_valid_f1,
        checkpoint.display(),
        run_record.display()
    )?;
    Ok(TrainOutputs {
        checkpoint,
        run_record,
        record,
    })
}

/// Scores `checkpoint` on `test` and prints the report.
pub fn cmd_eval(
    checkpoint: &Path,
    test: &Path,
    format: DataFormat,
    options: &EvalOptions,
    out: &mut dyn Write,
) -> Result<EvaluationReport> {
    cmd_eval_tokens(checkpoint, &read_corpus(test, format)?, options, out)
}

pub fn cmd_eval_tokens(
    checkpoint: &Path,
    tokens: &[LabeledToken],
    options: &EvalOptions,
    out: &mut dyn Write,
) -> Result<EvaluationReport> {
    let (model, vocab) = Checkpoint::load(checkpoint)
        .and_then(|c| c.restore())
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let batches = batchify(tokens, &vocab, model.config().max_len, EVAL_BATCH_SIZE, None)?;
    let report = evaluate(&model, &batches, options)?;
    write_json(out, &report)?;
    Ok(report)
}

/// Runs the oracle suite and prints its reports; fails when any family
/// misses its threshold.
pub fn cmd_gradcheck(seed: u64, trials: usize, fault: Option<Fault>, out: &mut dyn Write) -> Result<Vec<OracleReport>> {
    let options = SuiteOptions {
        fault,
        ..SuiteOptions::default()
    };
    let reports = run_oracle_suite(seed, trials, options)?;
    write_json(out, &reports)?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (trial seeds {:?})", r.name, r.failing_trials))
        .collect();
    if !failed.is_empty() {
        bail!("oracle checks failed: {}", failed.join("; "));
    }
    Ok(reports)
}
