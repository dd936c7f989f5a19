//! End-to-end runs of the `mora` binary on small configurations.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set",
    "data.generator.samples=120",
    "--set",
    "data.val_samples=20",
    "--set",
    "data.eval_samples=40",
    "--set",
    "optim.epochs=1",
];

fn mora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mora")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train_small(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--out", p(dir)];
    args.extend(SMALL);
    args.extend(extra);
    ok(mora(&args))
}

#[test]
fn gen_data_is_deterministic_and_counts_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |out: &Path| -> Vec<String> {
        ["gen-data", "--out", p(out), "--set", "data.generator.samples=1000", "--set", "data.eval_samples=40"]
            .map(String::from)
            .to_vec()
    };
    let run = |out: &Path| ok(mora(&args(out).iter().map(String::as_str).collect::<Vec<_>>()));
    let text = run(&a);
    run(&b);
    assert!(text.contains("train: complete=300 image_missing=350 text_missing=350"), "{text}");
    for f in ["train.jsonl", "val.jsonl", "eval.jsonl", "meta.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_is_reproducible_and_merge_preserves_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    let checksum = |s: &str| s.lines().find(|l| l.starts_with("checkpoint checksum")).unwrap().to_string();
    let a = train_small(&r1, &[]);
    let b = train_small(&r2, &[]);
    assert_eq!(checksum(&a), checksum(&b));

    let ckpt = r1.join("checkpoint.json");
    let merged = tmp.path().join("merged.json");
    let out = ok(mora(&["merge", "--checkpoint", p(&ckpt), "--out", p(&merged)]));
    assert!(out.contains("merged 8 weights"), "{out}");
    let cert: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("merged.certification.json")).unwrap()).unwrap();
    assert!(cert["max_relative_deviation"].as_f64().unwrap() < 1e-9);

    let again = mora(&["merge", "--checkpoint", p(&merged), "--out", p(&tmp.path().join("twice.json"))]);
    assert_eq!(code(&again), 2);

    let metrics = |c: &Path| {
        let v: serde_json::Value = serde_json::from_str(&ok(mora(&["eval", "--checkpoint", p(c)]))).unwrap();
        v["metrics"].clone()
    };
    assert_eq!(metrics(&ckpt), metrics(&merged));
}

#[test]
fn fresh_checkpoint_merges_within_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    train_small(tmp.path(), &["--set", "optim.lr=0"]);
    let merged = tmp.path().join("m.json");
    let report = tmp.path().join("cert.json");
    ok(mora(&[
        "merge",
        "--checkpoint",
        p(&tmp.path().join("checkpoint.json")),
        "--out",
        p(&merged),
        "--report",
        p(&report),
    ]));
    let cert: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(cert["max_relative_deviation"].as_f64().unwrap() < 1e-9);
}

#[test]
fn analyze_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut args = vec!["gen-data", "--out", p(&data)];
    args.extend(SMALL);
    ok(mora(&args));
    let run = tmp.path().join("run");
    train_small(&run, &["--data", p(&data)]);
    let ckpt = run.join("checkpoint.json");
    let an = tmp.path().join("an");

    let out = ok(mora(&["analyze", "--checkpoint", p(&ckpt), "--kind", "embeddings", "--out", p(&an)]));
    assert!(out.contains("40 rows"), "{out}");
    let csv = std::fs::read_to_string(an.join("embeddings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);

    ok(mora(&["analyze", "--checkpoint", p(&ckpt), "--kind", "spectrum", "--out", p(&an)]));
    ok(mora(&["analyze", "--checkpoint", p(&ckpt), "--kind", "drift", "--out", p(&an)]));
    // the stored eval split is complete
    ok(mora(&["analyze", "--checkpoint", p(&ckpt), "--kind", "intermodal", "--out", p(&an)]));
    let masked = mora(&[
        "analyze",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data.join("train.jsonl")),
        "--kind",
        "intermodal",
        "--out",
        p(&an),
    ]);
    assert_eq!(code(&masked), 2);
}

#[test]
fn sweep_rows_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("rank.csv");
    let mut args = vec!["sweep", "--axis", "rank", "--values", "1,2,4,8", "--out", p(&csv)];
    args.extend(SMALL);
    ok(mora(&args));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5, "{text}");

    let mut args = vec!["sweep", "--axis", "rank", "--values", "2,999", "--out", p(&csv)];
    args.extend(SMALL);
    assert_eq!(code(&mora(&args)), 1);

    let mut args = vec!["sweep", "--axis", "rank", "--values", "", "--out", p(&csv)];
    args.extend(SMALL);
    assert_eq!(code(&mora(&args)), 2);
}

#[test]
fn usage_and_numeric_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&mora(&["gen-data", "--out", p(&out), "--set", "adapter.rank=100"])), 2);
    assert_eq!(code(&mora(&["gen-data", "--out", p(&out), "--config", "/nonexistent.json"])), 2);
    assert_eq!(code(&mora(&["gen-data", "--out", p(&out), "--set", "no.such.key=1"])), 2);
    assert_eq!(code(&mora(&["eval", "--checkpoint", p(&tmp.path().join("missing.json"))])), 2);

    let mut args = vec!["train", "--out", p(&out), "--set", "optim.lr=1e300", "--set", "optim.warmup_fraction=0"];
    args.extend(SMALL);
    let o = mora(&args);
    assert_eq!(code(&o), 3, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}
