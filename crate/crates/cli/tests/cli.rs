use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regtext_core::data::{read_predictions, write_predictions, Dataset, PredictionRecord};

fn regtext(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regtext"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = regtext(cwd, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "iterations": 3,
  "warmup": 1,
  "log_every": 1,
  "vocab_size": 96,
  "scale_jitter": null,
  "encoder": { "embed_dim": 16, "depth": 2, "heads": 2, "global_blocks": [1], "mlp_ratio": 2 },
  "decoder": { "dim": 16, "heads": 2, "layers": 1 }
}"#;

struct Trained {
    _root: tempfile::TempDir,
    cwd: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

fn trained() -> Trained {
    let root = tempfile::tempdir().unwrap();
    let cwd = root.path().join("cwd");
    let data = root.path().join("data");
    let run = root.path().join("run");
    fs::create_dir_all(&cwd).unwrap();
    ok(&cwd, &["gen-data", "--seed", "4", "--n", "4", "--val-n", "2", "--out", s(&data)]);
    let cfg = root.path().join("config.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    ok(&cwd, &["train", "--config", s(&cfg), "--data", s(&data.join("train.json")), "--out", s(&run)]);
    Trained { _root: root, cwd, data, run }
}

#[test]
fn full_pipeline_writes_only_into_flag_directories() {
    let t = trained();
    for f in ["model.ckpt", "vocab.txt", "config.json", "loss_log.jsonl"] {
        assert!(t.run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(t.run.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let preds = t.run.join("preds.jsonl");
    let ckpt = t.run.join("model.ckpt");
    let val = t.data.join("val.json");
    ok(&t.cwd, &["infer", "--ckpt", s(&ckpt), "--data", s(&val), "--task", "[DenseCap]", "--beam", "2", "--out", s(&preds)]);
    let recs = read_predictions(&preds).unwrap();
    assert!(recs.iter().all(|r| r.task == 2));

    let json = ok(&t.cwd, &["eval", "--preds", s(&preds), "--gts", s(&val), "--metric", "densecap"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v["map"].is_number() && v["cells"].as_array().unwrap().len() == 5);

    let det = t.run.join("det.jsonl");
    ok(&t.cwd, &["infer", "--ckpt", s(&ckpt), "--data", s(&val), "--task", "1", "--vocab", s(&t.run.join("vocab.txt")), "--out", s(&det)]);
    let json = ok(&t.cwd, &["eval", "--preds", s(&det), "--gts", s(&val), "--metric", "det"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    for k in ["ap", "ap50", "ap75", "ar1", "ar10"] {
        assert!(v[k].is_number(), "{k}");
    }

    let svg = t.run.join("svg");
    ok(&t.cwd, &["render", "--preds", s(&preds), "--data", s(&val), "--out", s(&svg), "--threshold", "0"]);
    assert_eq!(fs::read_dir(&svg).unwrap().count(), 2);
    assert_eq!(fs::read_dir(&t.cwd).unwrap().count(), 0, "files written to the working directory");
}

#[test]
fn gen_data_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    ok(root.path(), &["gen-data", "--seed", "11", "--n", "3", "--out", s(&a)]);
    ok(root.path(), &["gen-data", "--seed", "11", "--n", "3", "--out", s(&b)]);
    for f in ["train.json", "val.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let val = Dataset::load(&a.join("val.json")).unwrap();
    assert_eq!(val.images.len(), 1);
}

#[test]
fn unknown_task_lists_valid_ids() {
    let t = trained();
    let out = regtext(
        &t.cwd,
        &["infer", "--ckpt", s(&t.run.join("model.ckpt")), "--data", s(&t.data.join("val.json")), "--task", "Caption", "--out", s(&t.run.join("p.jsonl"))],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("1 [ObjectDet]") && err.contains("2 [DenseCap]"), "{err}");
    assert!(!t.run.join("p.jsonl").exists());
}

#[test]
fn corrupt_checkpoint_exits_with_two() {
    let t = trained();
    let ckpt = t.run.join("model.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&ckpt, bytes).unwrap();
    let out = regtext(&t.cwd, &["infer", "--ckpt", s(&ckpt), "--data", s(&t.data.join("val.json")), "--task", "1", "--out", s(&t.run.join("p.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}

#[test]
fn usage_errors_exit_with_one() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(regtext(root.path(), &["train"]).status.code(), Some(1));
    assert_eq!(regtext(root.path(), &["eval", "--metric", "bleu", "--preds", "a", "--gts", "b"]).status.code(), Some(1));
    assert_eq!(regtext(root.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_train_config_is_a_configuration_error() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("d");
    ok(root.path(), &["gen-data", "--seed", "1", "--n", "2", "--out", s(&data)]);
    let cfg = root.path().join("c.json");
    fs::write(&cfg, r#"{ "task_mixture": [0.7, 0.7] }"#).unwrap();
    let out = regtext(root.path(), &["train", "--config", s(&cfg), "--data", s(&data.join("train.json")), "--out", s(&root.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

fn record(image_id: u64, score: f64) -> PredictionRecord {
    PredictionRecord { image_id, x1: 3.5, y1: 4.25, x2: 20.0, y2: 30.5, score, text: "a small red ring".into(), task: 2 }
}

fn render(dir: &Path, data: &Path, records: &[PredictionRecord]) -> (Output, PathBuf) {
    let preds = dir.join("p.jsonl");
    write_predictions(&preds, records).unwrap();
    let out = dir.join("svg");
    let o = regtext(dir, &["render", "--preds", s(&preds), "--data", s(data), "--out", s(&out)]);
    (o, out)
}

#[test]
fn render_draws_exactly_the_records_above_threshold() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("d");
    ok(root.path(), &["gen-data", "--seed", "2", "--n", "2", "--val-n", "1", "--out", s(&data)]);
    let val = data.join("val.json");
    let id = Dataset::load(&val).unwrap().images[0].id;

    let (o, out) = render(root.path(), &val, &[]);
    assert!(o.status.success());
    let svg = fs::read_to_string(out.join(format!("{id}.svg"))).unwrap();
    assert_eq!((svg.matches("<image").count(), svg.matches("<rect").count(), svg.matches("<text").count()), (1, 0, 0));

    let (o, out) = render(root.path(), &val, &[record(id, 0.9), record(id, 0.1)]);
    assert!(o.status.success());
    let svg = fs::read_to_string(out.join(format!("{id}.svg"))).unwrap();
    assert_eq!((svg.matches("<rect").count(), svg.matches("<text").count()), (1, 1));
    assert!(svg.contains(r#"x="3.5" y="4.25" width="16.5" height="26.25""#), "{svg}");

    let (o, out) = render(root.path(), &val, &[record(id, 0.9), record(77, 0.9)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("77"));
    assert_eq!(fs::read_to_string(out.join("skipped.txt")).unwrap().trim(), "77");
}

#[test]
fn grad_check_passes_on_one_seed() {
    let root = tempfile::tempdir().unwrap();
    let stdout = ok(root.path(), &["grad-check", "--seeds", "1"]);
    assert!(!stdout.contains("FAIL"));
}
