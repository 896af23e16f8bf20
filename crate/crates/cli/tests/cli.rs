use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chn::corpus::{split_path, write_jsonl};
use chn::synthetic::memorization_corpus;
use tempfile::TempDir;

fn chn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dataset() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let records = memorization_corpus(12, 60, 5);
    write_jsonl(&split_path(dir.path(), "train"), &records[..8]).unwrap();
    write_jsonl(&split_path(dir.path(), "dev"), &records[8..10]).unwrap();
    write_jsonl(&split_path(dir.path(), "test"), &records[10..]).unwrap();
    dir
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "batch_size = 4\nepochs = 2\nhidden = 8\nembed_dim = 6\nvocab_size = 1000\nseed = 9\n",
    )
    .unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_into(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let cfg = small_config(data);
    let mut args = vec!["train", "--config", s(&cfg), "--data-dir", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    chn(&args)
}

#[test]
fn unknown_flag_is_rejected() {
    let o = chn(&["stats", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--bogus"));
}

#[test]
fn missing_split_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = chn(&["stats", "--data-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing file"), "{}", stderr(&o));
}

#[test]
fn config_schema_violation_is_reported() {
    let data = dataset();
    let cfg = data.path().join("bad.toml");
    fs::write(&cfg, "batch_size = 4\nlearning_rate = 2.0\n").unwrap();
    let out = data.path().join("run");
    let o = chn(&["train", "--config", s(&cfg), "--data-dir", s(data.path()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("does not match the schema"), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn invalid_value_is_a_config_error() {
    let data = dataset();
    let out = data.path().join("run");
    let o = train_into(data.path(), &out, &["--lambda=-1"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("lambda_ssl"), "{}", stderr(&o));
}

#[test]
fn stats_prints_lengths() {
    let data = dataset();
    let o = chn(&["stats", "--data-dir", s(data.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("samples (pairs)           8"), "{text}");
    assert!(text.contains("avg article length"));
}

#[test]
fn gradcheck_subset_passes() {
    let o = chn(&["gradcheck", "--block", "coattention", "--block", "hierarchical_attention"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("coattention") && text.contains("hierarchical_attention"));
    assert!(!text.contains("FAIL"));

    let o = chn(&["gradcheck", "--block", "nonexistent"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("unknown gradient-check block"));
}

#[test]
fn train_generate_evaluate_round_trip() {
    let data = dataset();
    let run = data.path().join("run");
    let o = train_into(data.path(), &run, &["--preset", "hred"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.json", "model.json", "vocab.tsv", "best.ckpt", "train_log.jsonl", "epoch_1.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["coattention"], false);
    assert_eq!(manifest["config"]["ssl"], false);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);

    let generated = data.path().join("gen.jsonl");
    let ckpt = run.join("best.ckpt");
    let gen_args = [
        "generate", "--checkpoint", s(&ckpt), "--data-dir", s(data.path()), "--out", s(&generated),
        "--beam-size", "4", "--max-len", "6",
    ];
    let o = chn(&gen_args);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read_to_string(&generated).unwrap();
    let rows: Vec<serde_json::Value> = first.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["distractors"].as_array().unwrap().len(), 3);
    assert!(data.path().join("gen.jsonl.manifest.json").exists());

    assert!(chn(&gen_args).status.success());
    assert_eq!(fs::read_to_string(&generated).unwrap(), first);

    let report = data.path().join("report.json");
    let o = chn(&[
        "evaluate", "--generated", s(&generated), "--data-dir", s(data.path()), "--out", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("BLEU-4"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["slots"].as_array().unwrap().len(), 3);
}

#[test]
fn evaluate_gold_against_itself_is_perfect() {
    let data = dataset();
    let test = chn::corpus::load_tokenized(&split_path(data.path(), "test")).unwrap();
    let rows: Vec<serde_json::Value> = test
        .iter()
        .map(|t| {
            let d = t.distractors[0].join(" ");
            serde_json::json!({
                "id": t.id,
                "question": t.question.join(" "),
                "distractors": [d, d, d],
                "scores": [0.0, 0.0, 0.0],
                "relaxed_threshold": null,
            })
        })
        .collect();
    let generated = data.path().join("gold.jsonl");
    write_jsonl(&generated, &rows).unwrap();
    let o = chn(&["evaluate", "--generated", s(&generated), "--data-dir", s(data.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let first = text.lines().nth(1).unwrap();
    assert_eq!(first.split_whitespace().filter(|v| *v == "100.00").count(), 7, "{text}");

    let mut broken = rows[0].clone();
    broken["id"] = "unknown-id".into();
    write_jsonl(&generated, &[broken]).unwrap();
    let o = chn(&["evaluate", "--generated", s(&generated), "--data-dir", s(data.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown-id"));
}

#[test]
fn repeated_training_is_bit_identical() {
    let data = dataset();
    let (a, b) = (data.path().join("a"), data.path().join("b"));
    assert!(train_into(data.path(), &a, &[]).status.success());
    assert!(train_into(data.path(), &b, &[]).status.success());
    assert_eq!(fs::read(a.join("best.ckpt")).unwrap(), fs::read(b.join("best.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("vocab.tsv")).unwrap(), fs::read(b.join("vocab.tsv")).unwrap());
}

#[test]
fn single_precision_training_runs() {
    let data = dataset();
    let run = data.path().join("f32");
    let o = train_into(data.path(), &run, &["--precision", "f32", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let info: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("model.json")).unwrap()).unwrap();
    assert_eq!(info["precision"], "f32");
}
