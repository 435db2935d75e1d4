//! End-to-end runs of the `mivolo` binary.

use std::path::Path;
use std::process::{Command, Output};

fn mivolo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mivolo")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Micro-sized config that trains in a couple of seconds.
fn quick_config(dir: &Path) -> std::path::PathBuf {
    let out = mivolo(&["config", "--preset", "micro"]);
    assert!(out.status.success());
    let text: String = stdout(&out)
        .lines()
        .map(|l| if l.starts_with("steps = ") { "steps = 6\n".to_string() } else { format!("{l}\n") })
        .collect();
    let cfg = dir.join("quick.toml");
    std::fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn synth_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = mivolo(&["synth", "--n", "6", "--out", path(&data), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data.join("manifest.jsonl");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 6);

    let cfg = quick_config(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.log");
    let train = |log: &Path| {
        mivolo(&[
            "train",
            "--manifest",
            path(&manifest),
            "--config",
            path(&cfg),
            "--out",
            path(&ckpt),
            "--log",
            path(log),
        ])
    };
    let out = train(&log);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("steps=6"));
    let first = std::fs::read_to_string(&log).unwrap();
    assert!(first.lines().last().unwrap().starts_with("step=6 "));

    // a second run with the same seed logs the same losses
    let log2 = dir.path().join("train2.log");
    assert!(train(&log2).status.success());
    assert_eq!(first, std::fs::read_to_string(&log2).unwrap());

    let preds = dir.path().join("preds.jsonl");
    let out = mivolo(&[
        "eval",
        "--manifest",
        path(&manifest),
        "--checkpoint",
        path(&ckpt),
        "--mode",
        "face",
        "--out",
        path(&preds),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("mae=") && text.contains("cs@5=") && text.contains("evaluated=6 skipped=0"), "{text}");
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&preds).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0]["age"].is_f64());
}

#[test]
fn pair_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mivolo(&["synth", "--n", "1", "--out", path(&data)]).status.success());
    let det = data.join("det.jsonl");
    std::fs::write(
        &det,
        r#"{"image":"scene_00000.ppm","detections":[{"kind":"person","x0":64,"y0":0,"x1":128,"y1":64,"score":0.9},{"kind":"face","x0":70,"y0":4,"x1":100,"y1":30,"score":0.8}]}"#,
    )
    .unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    let out = mivolo(&["pair", "--detections", path(&det), "--out", path(&pairs)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("pairs=1"));

    let votes = dir.path().join("votes.jsonl");
    let controls = dir.path().join("controls.jsonl");
    std::fs::write(
        &votes,
        "{\"task\":\"t\",\"user\":\"a\",\"age\":20,\"gender\":null}\n{\"task\":\"t\",\"user\":\"b\",\"age\":30,\"gender\":null}\n",
    )
    .unwrap();
    std::fs::write(
        &controls,
        "{\"user\":\"a\",\"voted\":10,\"truth\":10.5}\n{\"user\":\"b\",\"voted\":10,\"truth\":12}\n",
    )
    .unwrap();
    let agg = dir.path().join("agg.jsonl");
    let users = dir.path().join("users.jsonl");
    let out = mivolo(&[
        "aggregate",
        "--votes",
        path(&votes),
        "--controls",
        path(&controls),
        "--out",
        path(&agg),
        "--users",
        path(&users),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(&users).unwrap();
    assert!(report.starts_with(r#"{"user":"a","mae":0.5,"controls":1,"cs3":100.0}"#), "{report}");
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&agg).unwrap().trim()).unwrap();
    assert!((line["age"].as_f64().unwrap() - 21.824).abs() < 1e-3, "{line}");

    let out = mivolo(&["aggregate", "--votes", path(&votes), "--method", "median", "--out", path(&agg)]);
    assert!(out.status.success());
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&agg).unwrap().trim()).unwrap();
    assert_eq!(line["age"].as_f64(), Some(25.0));
}

#[test]
fn gradcheck_on_micro() {
    let out = mivolo(&["gradcheck", "--preset", "micro", "--samples", "2", "--per-group", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("max_rel_error="));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = mivolo(&["eval", "--manifest", path(&missing), "--checkpoint", path(&missing)]);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nbogus = 2\n").unwrap();
    let out = mivolo(&["gradcheck", "--config", path(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    // a step this large is all truncation error
    let out = mivolo(&["gradcheck", "--preset", "micro", "--samples", "1", "--per-group", "1", "--h", "0.5"]);
    assert_eq!(out.status.code(), Some(2), "{}", stdout(&out));
}
