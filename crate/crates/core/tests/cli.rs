use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lwpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lwpt")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lwpt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) {
    ok(&["synth", "--out", p(dir), "--num-docs", &n.to_string(), "--seed", &seed.to_string()]);
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn synth_writes_splits_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, 101, 5);
    synth(&b, 101, 5);
    let sizes: Vec<usize> = ["train", "valid", "test"].iter().map(|s| lines(&a.join(format!("synth.{s}.jsonl")))).collect();
    assert_eq!(sizes, vec![70, 15, 16]);
    for f in ["synth.train.jsonl", "synth.valid.jsonl", "synth.test.jsonl", "synth.truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let truth: Value = serde_json::from_str(&fs::read_to_string(a.join("synth.truth.json")).unwrap()).unwrap();
    assert_eq!(truth["label_names"].as_array().unwrap().len(), 6);
    assert!(a.join("manifest.json").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = lwpt(&["finetune", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
    let missing = dir.path().join("nope.jsonl");
    let out = lwpt(&["pretrain", "--train", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(lwpt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(lwpt(&["--help"]).status.code(), Some(0));
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "epochs = 3\nnot_a_key = 1\n").unwrap();
    let out = lwpt(&["pretrain", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

fn write_eval_fixture(dir: &Path, preds: &[&str]) -> std::path::PathBuf {
    fs::write(dir.join("labels.json"), r#"["x", "y", "z"]"#).unwrap();
    let path = dir.join("predictions.jsonl");
    fs::write(&path, preds.join("\n")).unwrap();
    path
}

#[test]
fn eval_of_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let preds = write_eval_fixture(
        dir.path(),
        &[
            r#"{"id":"a","scores":[0.9,0.1,0.8],"predicted":["x","z"],"gold":["x","z"]}"#,
            r#"{"id":"b","scores":[0.2,0.7,0.1],"predicted":["y"],"gold":["y"]}"#,
        ],
    );
    let json = dir.path().join("report.json");
    let table = ok(&["eval", "--predictions", p(&preds), "--output", p(&json)]);
    assert!(table.contains("MacroF1"));
    let r: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(r["one_error"], 0.0);
    assert_eq!(r["hamming_loss"], 0.0);
    assert_eq!(r["macro_f1"], 1.0);
    assert_eq!(r["micro_f1"], 1.0);
}

#[test]
fn eval_reports_bad_lines_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let preds = write_eval_fixture(
        dir.path(),
        &[r#"{"id":"a","scores":[0.9,0.1,0.8],"predicted":["x"],"gold":["x"]}"#, "{not json"],
    );
    let out = lwpt(&["eval", "--predictions", p(&preds)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("predictions.jsonl:2:"));

    let preds = write_eval_fixture(
        dir.path(),
        &[r#"{"id":"a","scores":[0.9,0.1,0.8],"predicted":["x"],"gold":["w"]}"#],
    );
    let out = lwpt(&["eval", "--predictions", p(&preds)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`w`"));
}

#[test]
fn small_pipeline_through_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(&root.join("data"), 90, 1);
    let split = |s: &str| root.join(format!("data/synth.{s}.jsonl"));
    let cfg = root.join("run.toml");
    fs::write(
        &cfg,
        "train = \"data/synth.train.jsonl\"\nvalid = \"data/synth.valid.jsonl\"\ntest = \"data/synth.test.jsonl\"\n\
         dim = 3\nmax_words = 12\npretrain_steps = 4\npretrain_batch_size = 4\nepochs = 2\nbatch_size = 8\n",
    )
    .unwrap();
    let c = p(&cfg);

    ok(&["pretrain", "--config", c, "--out", p(&root.join("pt"))]);
    let losses = fs::read_to_string(root.join("pt/pretrain_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5);

    let ckpt = root.join("pt/pretrained.ckpt");
    ok(&["finetune", "--config", c, "--out", p(&root.join("ft")), "--checkpoint", p(&ckpt)]);
    for f in ["finetuned.ckpt", "labels.json", "predictions.valid.jsonl", "predictions.test.jsonl", "metrics.json", "manifest.json"] {
        assert!(root.join("ft").join(f).exists(), "{f}");
    }
    assert_eq!(lines(&root.join("ft/predictions.test.jsonl")), lines(&split("test")));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(root.join("ft/manifest.json")).unwrap()).unwrap();
    assert!(manifest["artifacts"]["finetuned.ckpt"].as_str().unwrap().len() == 64);

    // Evaluating the written predictions reproduces the stored test metrics.
    let eval_json = root.join("eval.json");
    ok(&["eval", "--predictions", p(&root.join("ft/predictions.test.jsonl")), "--output", p(&eval_json)]);
    let stored: Value = serde_json::from_str(&fs::read_to_string(root.join("ft/metrics.json")).unwrap()).unwrap();
    let eval: Value = serde_json::from_str(&fs::read_to_string(&eval_json).unwrap()).unwrap();
    assert_eq!(stored["test"]["macro_f1"], eval["macro_f1"]);

    let first_test = fs::read_to_string(split("test")).unwrap();
    let query: Value = serde_json::from_str(first_test.lines().next().unwrap()).unwrap();
    ok(&[
        "analyze", "--config", c, "--out", p(&root.join("an")),
        "--checkpoint", p(&root.join("ft/finetuned.ckpt")),
        "--query", query["id"].as_str().unwrap(), "--label", "label0", "--topk", "4",
        "--predictions", p(&root.join("ft/predictions.test.jsonl")),
    ]);
    let corr: Value = serde_json::from_str(&fs::read_to_string(root.join("an/correlation.json")).unwrap()).unwrap();
    assert!(corr["rank_correlation"].is_number());
    assert!(root.join("an/neighbors.json").exists() && root.join("an/freq_f1.csv").exists());

    let out = ok(&["sweep", "--config", c, "--out", p(&root.join("sw")), "--grid", "candidates", "--candidate-grid", "3,4"]);
    assert!(out.contains("pt-n3") && out.contains("pt-n4"));
    assert_eq!(lines(&root.join("sw/sweep.csv")), 3);
}
