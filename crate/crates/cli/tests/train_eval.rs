mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use punctscl::model::PunctuationModel;
use punctscl::{Checkpoint, EncoderConfig, Vocabulary};
use serde_json::{json, Value};

fn train(dir: &Path, name: &str, config: &Value, extra_args: &[&str]) -> (std::process::Output, PathBuf) {
    let path = write_config(dir, name, config);
    let mut args = vec!["train", "--config", path.to_str().unwrap()];
    args.extend_from_slice(extra_args);
    (run(&args), path)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_schema_valid_outputs_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(json!({"output_dir": "out"}));
    let mut records = Vec::new();
    for seed in ["1", "2"] {
        let (out, _) = train(dir.path(), "c.json", &config, &["--seed", seed]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 2, "{stdout}");
        assert!(stdout.contains("valid_f1"));

        let record = read_json(&dir.path().join(format!("out/run-seed{seed}-ce.json")));
        assert_schema("run_record.schema.json", &record);
        assert_eq!(record["seed"].as_u64().unwrap().to_string(), seed);
        let best = record["best_epoch"].as_u64().unwrap() as usize;
        let f1s: Vec<f64> = record["epochs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["valid_f1"].as_f64().unwrap())
            .collect();
        assert_eq!(record["best_valid_f1"].as_f64().unwrap(), f1s[best]);
        assert!(f1s.iter().all(|&f| f <= f1s[best]));
        assert_schema(
            "checkpoint.schema.json",
            &read_json(&dir.path().join(format!("out/model-seed{seed}-ce.json"))),
        );
        records.push(record);
    }
    assert_ne!(records[0], records[1]);
}

#[test]
fn repeated_training_gives_byte_identical_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(json!({"loss": {"kind": "SCL_COMBINED"}, "output_dir": "out"}));
    let (a, _) = train(dir.path(), "c.json", &config, &[]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let first = fs::read(dir.path().join("out/run-seed0-scl.json")).unwrap();
    let first_model = fs::read(dir.path().join("out/model-seed0-scl.json")).unwrap();
    let (b, _) = train(dir.path(), "c.json", &config, &[]);
    assert!(b.status.success());
    assert_eq!(fs::read(dir.path().join("out/run-seed0-scl.json")).unwrap(), first);
    assert_eq!(
        fs::read(dir.path().join("out/model-seed0-scl.json")).unwrap(),
        first_model
    );
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn lambda_zero_matches_cross_entropy_run() {
    let dir = tempfile::tempdir().unwrap();
    let ce = tiny_config(json!({"output_dir": "ce"}));
    let scl = tiny_config(json!({"loss": {"kind": "SCL_COMBINED", "lambda": 0.0}, "output_dir": "scl"}));
    assert!(train(dir.path(), "ce.json", &ce, &[]).0.status.success());
    assert!(train(dir.path(), "scl.json", &scl, &[]).0.status.success());
    let mut a = read_json(&dir.path().join("ce/run-seed0-ce.json"));
    let mut b = read_json(&dir.path().join("scl/run-seed0-scl.json"));
    // the config snapshot necessarily records the different loss selector
    assert_ne!(a["train"]["loss"]["kind"], b["train"]["loss"]["kind"]);
    a["train"]["loss"] = Value::Null;
    b["train"]["loss"] = Value::Null;
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("ce/model-seed0-ce.json")).unwrap(),
        fs::read(dir.path().join("scl/model-seed0-scl.json")).unwrap()
    );
}

#[test]
fn train_without_data_or_with_missing_files_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = train(dir.path(), "none.json", &json!({"train": {"epochs": 1}}), &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no training data"));

    let missing = json!({"data": {"train": "missing.tsv", "valid": "missing.tsv"}});
    let (out, _) = train(dir.path(), "missing.json", &missing, &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.tsv"));
}

#[test]
fn train_from_prepared_files_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let synth = write_config(
        dir.path(),
        "synth.json",
        &json!({"data": {"synth": {"n_tokens": 3000, "seed": 3}}, "output_dir": "data"}),
    );
    assert!(run(&["synth", "--config", synth.to_str().unwrap()]).status.success());
    let config = tiny_config(json!({
        "data": {"synth": null, "train": "data/train.tsv", "valid": "data/valid.tsv", "test": "data/test.tsv"},
        "output_dir": "out"
    }));
    let (out, config_path) = train(dir.path(), "train.json", &config, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = dir.path().join("out/model-seed0-ce.json");

    // on its own training data
    let out = run(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--test",
        dir.path().join("data/train.tsv").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_schema("evaluation_report.schema.json", &report);
    for class in ["COMMA", "PERIOD", "QUESTION", "OVERALL"] {
        for m in ["P", "R", "F1"] {
            let v = report[class][m].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{class}.{m} = {v}");
        }
    }
    assert!(report.get("separation").is_none());
    let total: u64 = report["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 3000);

    // test path from the config, with diagnostics
    let out = run(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        config_path.to_str().unwrap(),
        "--diagnose",
        "--averaging",
        "macro",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_schema("evaluation_report.schema.json", &report);
    assert_eq!(report["averaging"], "macro");
    let sep = &report["separation"];
    let (intra, inter, score) = (
        sep["intra"].as_f64().unwrap(),
        sep["inter"].as_f64().unwrap(),
        sep["score"].as_f64().unwrap(),
    );
    assert!((score - (intra - inter)).abs() < 1e-12);
}

fn all_o_checkpoint(path: &Path) -> Vocabulary {
    let vocab =
        Vocabulary::from_tokens(vec!["<pad>".into(), "<unk>".into(), "hello".into(), "world".into()], 1).unwrap();
    let config = EncoderConfig {
        vocab_size: vocab.len(),
        model_dim: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 16,
        ..EncoderConfig::default()
    };
    let mut model = PunctuationModel::init(config, 9).unwrap();
    for p in model.parameters_mut() {
        if p.name == "classifier.bias" {
            p.value.data_mut().copy_from_slice(&[50.0, 0.0, 0.0, 0.0]);
        }
    }
    Checkpoint::capture(&model, &vocab).save(path).unwrap();
    vocab
}

#[test]
fn all_o_model_scores_zero_overall_f1() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = dir.path().join("o.json");
    all_o_checkpoint(&checkpoint);
    let test = dir.path().join("test.tsv");
    fs::write(&test, "hello\tCOMMA\nworld\tPERIOD\nhello\tO\nworld\tQUESTION\n").unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["OVERALL"]["F1"].as_f64().unwrap(), 0.0);
    assert_eq!(report["OVERALL"]["undefined"], true);
}

#[test]
fn mismatched_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = dir.path().join("o.json");
    all_o_checkpoint(&checkpoint);
    let test = dir.path().join("test.tsv");
    fs::write(&test, "hello\tO\n").unwrap();

    let mut value = read_json(&checkpoint);
    value["vocabulary"].as_array_mut().unwrap().pop();
    fs::write(&checkpoint, value.to_string()).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
    ]);
    assert!(!out.status.success());

    let out = run(&[
        "eval",
        "--checkpoint",
        dir.path().join("absent.json").to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn thread_env_var_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, "Hi.").unwrap();
    let output = dir.path().join("o.tsv");
    let args = ["prepare", input.to_str().unwrap(), "-o", output.to_str().unwrap()];
    assert!(bin()
        .args(args)
        .env("PUNCTSCL_THREADS", "2")
        .output()
        .unwrap()
        .status
        .success());
    assert!(!bin()
        .args(args)
        .env("PUNCTSCL_THREADS", "zero")
        .output()
        .unwrap()
        .status
        .success());
    assert!(!bin()
        .args(args)
        .env("PUNCTSCL_THREADS", "0")
        .output()
        .unwrap()
        .status
        .success());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &tiny_config(json!({"train": {"epochs": 1}})));
    let mut records = Vec::new();
    for threads in ["1", "3"] {
        let out = bin()
            .args(["train", "--config", config.to_str().unwrap()])
            .env("PUNCTSCL_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        records.push(fs::read(dir.path().join("runs/run-seed0-ce.json")).unwrap());
    }
    assert_eq!(records[0], records[1]);
}

#[test]
fn eval_falls_back_to_the_synthetic_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(json!({"train": {"epochs": 1}, "output_dir": "out"}));
    let (out, config_path) = train(dir.path(), "c.json", &config, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let checkpoint = dir.path().join("out/model-seed0-ce.json");
    let config_arg = config_path.to_str().unwrap();
    assert!(run(&["synth", "--config", config_arg]).status.success());

    let regenerated = run(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        config_arg,
    ]);
    assert!(
        regenerated.status.success(),
        "{}",
        String::from_utf8_lossy(&regenerated.stderr)
    );
    let written = dir.path().join("out/test.tsv");
    let from_file = run(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--test",
        written.to_str().unwrap(),
    ]);
    assert_eq!(regenerated.stdout, from_file.stdout);
    let total: u64 = stdout_json(&from_file)["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 600);
}
