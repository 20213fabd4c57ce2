use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn hydra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydra")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hydra(args);
    assert!(
        out.status.success(),
        "hydra {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates the tiny dataset and trains the tiny config on it.
fn tiny_run(root: &Path) -> (PathBuf, PathBuf) {
    let (data, run) = (root.join("data"), root.join("run"));
    let data_cfg = configs().join("tiny-data.toml");
    ok(&["gen", "--config", s(&data_cfg), "--seed", "3", "--out", s(&data)]);
    let cfg = configs().join("tiny.toml");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    (data, run)
}

fn regions(csv: &Path) -> Vec<String> {
    std::fs::read_to_string(csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect()
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("tiny-data.toml");
    for name in ["a", "b"] {
        ok(&[
            "gen",
            "--config",
            s(&cfg),
            "--seed",
            "9",
            "--out",
            s(&dir.path().join(name)),
        ]);
    }
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert!(a.keys().any(|k| k.ends_with(".png")));
    assert!(a.contains_key("truth-eval.csv") && a.contains_key("weights.csv"));
    assert_eq!(a, b);
}

fn tree(root: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn infeasible_spec_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "classes = 3\nmultiplicity = [0.5, 0.2]\n").unwrap();
    let out = hydra(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiplicity"));

    std::fs::write(&cfg, "classes = 3\nunknown_field = 1\n").unwrap();
    assert_eq!(
        code(&hydra(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("d"))])),
        1
    );
    assert_eq!(code(&hydra(&["gen"])), 1, "--out is required");
    assert_eq!(code(&hydra(&["frobnicate"])), 1);
}

#[test]
fn train_predict_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = tiny_run(dir.path());
    for file in [
        "config.toml",
        "run.json",
        "checkpoints/residual-body.ckpt",
        "checkpoints/head-a.ckpt",
        "logs/head-b.csv",
    ] {
        assert!(run.join(file).is_file(), "{file}");
    }

    // a second invocation resumes from every checkpoint and changes nothing
    let cfg = configs().join("tiny.toml");
    let before = std::fs::read(run.join("checkpoints/head-b.ckpt")).unwrap();
    let out = hydra(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("resuming"));
    assert_eq!(std::fs::read(run.join("checkpoints/head-b.ckpt")).unwrap(), before);

    // the same directory refuses a different config
    let out = hydra(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "8",
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&out), 1);

    let pred_dir = dir.path().join("pred");
    let eval = data.join("eval.json");
    let stdout = ok(&["predict", "--run", s(&run), "--data", s(&eval), "--out", s(&pred_dir)]);
    assert!(stdout.contains("fused:"));
    let truth = data.join("truth-eval.csv");
    let mut predicted = regions(&pred_dir.join("predictions.csv"));
    let mut expected = regions(&truth);
    predicted.sort();
    expected.sort();
    assert_eq!(predicted, expected, "one prediction per eval region");
    assert!(pred_dir.join("scores/head-a.csv").is_file());

    let weights = data.join("weights.csv");
    let report = dir.path().join("score.json");
    ok(&[
        "score",
        "--pred",
        s(&truth),
        "--truth",
        s(&truth),
        "--weights",
        s(&weights),
        "--out",
        s(&report),
    ]);
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["fmeasure"].as_f64(), Some(1.0));

    let text = ok(&[
        "score",
        "--pred",
        s(&pred_dir.join("predictions.csv")),
        "--truth",
        s(&truth),
        "--weights",
        s(&weights),
    ]);
    assert!(text.contains("weighted F-measure"));

    let summary = ok(&["report", "--run", s(&run)]);
    assert!(summary.contains("a") && summary.contains("b"));
}

#[test]
fn malformed_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("weights.csv");
    std::fs::write(&weights, "label_index,weight\n0,1.0\n1,1.0\n2,0.0\n").unwrap();
    let truth = dir.path().join("truth.csv");
    std::fs::write(&truth, "region_id,label\nr1,0\nr2,1\n").unwrap();
    let score = |pred: &str| {
        let p = dir.path().join("pred.csv");
        std::fs::write(&p, pred).unwrap();
        code(&hydra(&[
            "score",
            "--pred",
            s(&p),
            "--truth",
            s(&truth),
            "--weights",
            s(&weights),
        ]))
    };
    assert_eq!(score("region_id,label\nr1,0\nr2,1\n"), 0);
    assert_eq!(score("region,label\nr1,0\nr2,1\n"), 2);
    assert_eq!(score("region_id,label\nr1,zero\nr2,1\n"), 2);
    assert_eq!(score("region_id,label\nr1,0\n"), 2, "a missing region");
    assert_eq!(score("region_id,label\nr1,0\nr2,1\nr3,1\n"), 2, "an unknown region");
    assert_eq!(score("region_id,label\nr1,0\nr2,7\n"), 2, "a label outside the table");

    let missing = dir.path().join("nope");
    let out = hydra(&["predict", "--run", s(&missing), "--data", s(&truth)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn cost_of_the_default_roster() {
    let out = ok(&["cost"]);
    let c: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(c["hydra_epochs"], 72);
    assert_eq!(c["independent_epochs"], 132);
    let cfg = configs().join("full-roster.toml");
    assert_eq!(ok(&["cost", "--config", s(&cfg)]), out);
}
