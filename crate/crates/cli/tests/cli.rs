use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcap")).args(args).output().expect("tcap runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SHORT: &str = "[300,100,600]";

fn synth(dir: &Path) -> String {
    let out = tcap(&["synth", "--output_dir", s(dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("dataset.json").to_string_lossy().into_owned()
}

#[test]
fn pipeline_writes_only_into_the_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = synth(&tmp.path().join("data"));
    let run = tmp.path().join("run");
    let out = tcap(&["train", "--dataset", &dataset, "--output_dir", s(&run), "--train.iterations", SHORT]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("resolved config"));
    let csv = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,stage,loss"));
    assert_eq!(csv.lines().count(), 1001);

    let out = tcap(&["generate", "--dataset", &dataset, "--output_dir", s(&run), "--decode.beam_size", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines = fs::read_to_string(run.join("captions.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 32);

    let out = tcap(&["eval", "--dataset", &dataset, "--output_dir", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["bleu"].as_array().unwrap().len(), 4);
    assert_eq!(report["per_example"].as_array().unwrap().len(), 32);

    let ck = run.join("checkpoint.tcg");
    let out = tcap(&["analyze", "--word", "dog", "--k", "6", "--checkpoint", s(&ck), "--output_dir", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows: Value = serde_json::from_str(&fs::read_to_string(run.join("neighbors.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["word"], "dog");
    assert_eq!(rows[0]["neighbors"].as_array().unwrap().len(), 6);
    assert!(fs::read_to_string(run.join("neighbors.txt")).unwrap().starts_with("word"));

    let mut written: Vec<String> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    written.sort();
    assert_eq!(
        written,
        ["captions.jsonl", "checkpoint.tcg", "losses.csv", "metrics.json", "neighbors.json", "neighbors.txt"]
    );
    let top: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
    assert_eq!(top.len(), 2);
}

#[test]
fn identical_runs_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = synth(&tmp.path().join("data"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = tcap(&["train", "--seed", "3", "--dataset", &dataset, "--output_dir", s(dir), "--train.iterations", "[40,20,40]"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for file in ["checkpoint.tcg", "losses.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let c = tmp.path().join("c");
    tcap(&["train", "--seed", "4", "--dataset", &dataset, "--output_dir", s(&c), "--train.iterations", "[40,20,40]"]);
    assert_ne!(fs::read(a.join("losses.csv")).unwrap(), fs::read(c.join("losses.csv")).unwrap());
}

#[test]
fn gradcheck_from_a_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.json");
    let out_dir = tmp.path().join("gc");
    fs::write(
        &cfg,
        format!(
            r#"{{"output_dir": {:?}, "gradcheck": {{"dims": {{"vocab": 9, "embed": 5, "hidden": 6, "image": 7, "raw": 4}}}}}}"#,
            s(&out_dir)
        ),
    )
    .unwrap();
    let out = tcap(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradient check passed"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 25);

    let out = tcap(&["gradcheck", "--config", s(&cfg), "--gradcheck.options.tolerance", "1e-12"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn empty_dataset_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = synth(&tmp.path().join("data"));
    let mut manifest: Value = serde_json::from_str(&fs::read_to_string(&dataset).unwrap()).unwrap();
    manifest["examples"] = Value::Array(Vec::new());
    fs::write(&dataset, manifest.to_string()).unwrap();
    let cfg = tmp.path().join("empty.json");
    fs::write(&cfg, format!(r#"{{"dataset": {dataset:?}, "output_dir": {:?}}}"#, s(&tmp.path().join("run")))).unwrap();
    let out = tcap(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("empty dataset"), "{}", stderr(&out));
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(code(&tcap(&["frobnicate"])), 1);
    assert_eq!(code(&tcap(&["train", "--output_dir", s(&run)])), 1);
    assert_eq!(code(&tcap(&["synth", "--output_dir", s(&run), "--synth.colour", "1"])), 1);
    assert_eq!(code(&tcap(&["train", "--dataset", "/no/such/dataset.json", "--output_dir", s(&run)])), 2);
    assert_eq!(code(&tcap(&["train", "--config", "/no/such/config.json"])), 2);
    assert_eq!(code(&tcap(&["analyze", "--checkpoint", "/no/such.tcg", "--output_dir", s(&run)])), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&tcap(&["synth", "--config", s(&bad)])), 2);

    let dataset = synth(&tmp.path().join("data"));
    let out = tcap(&[
        "train", "--dataset", &dataset, "--output_dir", s(&run), "--train.lr_lm", "1e300", "--train.iterations", "[5,0,0]",
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert_eq!(code(&tcap(&["--help"])), 0);
}
