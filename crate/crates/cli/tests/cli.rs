use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_anomattr");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("ANOMATTR_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr is one JSON object")
}

const SMALL: &str = r#"{
    "model": {"epochs": 3, "encoder_width": 8, "latent_dim": 2},
    "preprocess": {"window": 5},
    "attribution": {"direction": "negative-delta"}
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), SMALL).unwrap();
    ok(dir.path(), &["synth", "--seed", "3", "--length", "700", "--out", "d.csv"]);
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn pipeline_matches_the_subcommands_in_sequence() {
    let dir = setup();
    let d = dir.path();
    fn with<'a>(args: &[&'a str]) -> Vec<&'a str> {
        [&["--config", "c.json"][..], args].concat()
    }
    ok(d, &with(&["pipeline", "--input", "d.csv", "--out", "run"]));

    ok(d, &with(&["preprocess", "--input", "d.csv", "--norm-out", "n.json", "--out", "p.csv"]));
    ok(d, &with(&["cluster", "--input", "p.csv", "--out", "c2.json"]));
    ok(
        d,
        &with(&[
            "train", "--input", "p.csv", "--clusters", "c2.json", "--norm", "n.json", "--history", "h.csv", "--out",
            "m.json",
        ]),
    );
    ok(d, &with(&["score", "--input", "p.csv", "--model", "m.json", "--out", "s.csv"]));
    ok(d, &with(&["threshold", "--scores", "s.csv", "--out", "f.csv"]));
    ok(
        d,
        &with(&[
            "attribute", "--input", "p.csv", "--model", "m.json", "--scores", "s.csv", "--flags", "f.csv", "--out",
            "a.csv",
        ]),
    );
    ok(d, &with(&["rank", "--attributions", "a.csv", "--out", "r.json"]));
    ok(d, &with(&["decadal", "--flags", "f.csv", "--out", "dec.csv"]));

    for (seq, pipe) in [
        ("p.csv", "run/preprocessed.csv"),
        ("n.json", "run/norm.json"),
        ("c2.json", "run/clusters.json"),
        ("m.json", "run/model.json"),
        ("h.csv", "run/history.csv"),
        ("s.csv", "run/scores.csv"),
        ("f.csv", "run/flags.csv"),
        ("a.csv", "run/attributions.csv"),
        ("r.json", "run/ranking.json"),
        ("dec.csv", "run/decadal.csv"),
    ] {
        assert_eq!(read(d, seq), read(d, pipe), "{seq} vs {pipe}");
    }
}

#[test]
fn pipeline_without_input_generates_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"seed": 5, "synth": {"length": 600}, "model": {"epochs": 2, "encoder_width": 4, "latent_dim": 2},
            "preprocess": {"window": 4}}"#,
    )
    .unwrap();
    ok(dir.path(), &["pipeline", "--config", "c.json", "--out", "run"]);
    for name in ["data.csv", "data.truth.json", "scores.csv", "flags.csv", "attributions.csv", "ranking.json"] {
        assert!(dir.path().join("run").join(name).exists(), "{name}");
    }
}

#[test]
fn multi_grid_pipeline_per_grid_and_pooled() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), SMALL).unwrap();
    ok(d, &["synth", "--grids", "2", "--length", "500", "--out", "g.csv"]);
    let truth: serde_json::Value = serde_json::from_slice(&read(d, "g.truth.json")).unwrap();
    assert!(truth.get("g000").is_some() && truth.get("g001").is_some());

    ok(d, &["--config", "c.json", "pipeline", "--input", "g.csv", "--out", "per"]);
    assert!(d.join("per/g000/model.json").exists() && d.join("per/g001/model.json").exists());
    ok(d, &["--config", "c.json", "pipeline", "--pooled", "--input", "g.csv", "--out", "pool"]);
    assert!(d.join("pool/model.json").exists() && !d.join("pool/g000/model.json").exists());
    assert!(d.join("pool/g001/attributions.csv").exists());
    let ranking: serde_json::Value = serde_json::from_slice(&read(d, "pool/ranking.json")).unwrap();
    assert_eq!(ranking.as_array().unwrap().len(), 8);

    let out = run(d, &["cluster", "--input", "g.csv", "--out", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "MultipleGrids");
    ok(d, &["cluster", "--input", "g.csv", "--grid", "g001", "--out", "c1.json"]);
}

#[test]
fn error_exit_codes() {
    let dir = setup();
    let d = dir.path();

    let out = run(d, &["train", "--input", "missing.csv", "--clusters", "c.json", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(4));
    let err = error_json(&out);
    assert_eq!(err["error"], "Io");
    assert_eq!(err["class"], "io");

    fs::write(d.join("bad.json"), r#"{"seed": 1, "unknown": true}"#).unwrap();
    let out = run(d, &["--config", "bad.json", "synth", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "InvalidConfig");

    let out = run(d, &["synth", "--rate", "0.5", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "Usage");

    fs::write(d.join("s.csv"), "timestamp,score\n2000-01-01,1\n").unwrap();
    let out = run(d, &["threshold", "--scores", "s.csv", "--out", "f.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "WindowTooLarge");

    assert_eq!(run(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn diverging_training_exits_with_numerical_code() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["preprocess", "--input", "d.csv", "--out", "p.csv"]);
    ok(d, &["cluster", "--input", "p.csv", "--k", "2", "--out", "c2.json"]);
    let out = run(
        d,
        &[
            "train", "--input", "p.csv", "--clusters", "c2.json", "--window", "5", "--epochs", "3", "--lr", "1e300",
            "--out", "m.json",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_json(&out)["error"], "NonFiniteLoss");
}

#[test]
fn flags_override_config() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("k.json"), r#"{"cluster": {"k": 3}}"#).unwrap();
    ok(d, &["preprocess", "--input", "d.csv", "--out", "p.csv"]);
    ok(d, &["--config", "k.json", "cluster", "--input", "p.csv", "--out", "a.json"]);
    ok(d, &["--config", "k.json", "cluster", "--input", "p.csv", "--k", "2", "--out", "b.json"]);
    let k = |name: &str| serde_json::from_slice::<serde_json::Value>(&read(d, name)).unwrap()["k"].clone();
    assert_eq!(k("a.json"), 3);
    assert_eq!(k("b.json"), 2);

    ok(d, &["synth", "--seed", "1", "--length", "100", "--out", "s1.csv"]);
    fs::write(d.join("seed.json"), r#"{"seed": 2}"#).unwrap();
    ok(d, &["--config", "seed.json", "synth", "--seed", "1", "--length", "100", "--out", "s2.csv"]);
    assert_eq!(read(d, "s1.csv"), read(d, "s2.csv"));
}

#[test]
fn ttest_from_samples_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.txt"), "2, 4, 6\n").unwrap();
    fs::write(d.join("b.txt"), "1\n2\n3\n").unwrap();
    let out = run(d, &["ttest", "--a", "a.txt", "--b", "b.txt"]);
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((r["t_stat"].as_f64().unwrap() - 1.549_193_338).abs() < 1e-6);

    // Two grids of flags over 1980–2001, more flags in the later period.
    for (g, extra) in [("g1", 0), ("g2", 1)] {
        let mut csv = String::from("timestamp,score,threshold,flag\n");
        for year in 1980..=2001 {
            for day in 1..=10 {
                let flag = u8::from(day <= 1 + extra + usize::from(year > 1990) * 3);
                csv.push_str(&format!("{year}-07-{day:02},0,0,{flag}\n"));
            }
        }
        fs::write(d.join(format!("{g}.csv")), csv).unwrap();
    }
    let out = run(
        d,
        &[
            "ttest", "--flags", "g1.csv", "g2.csv", "--period-a", "1981-1990", "--period-b", "1991-2000", "--months",
            "7",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["t_stat"].as_f64().unwrap() < 0.0);

    ok(d, &["decadal", "--flags", "g1.csv", "g2.csv", "--months", "7", "--out", "dec.csv"]);
    let text = String::from_utf8(read(d, "dec.csv")).unwrap();
    assert!(text.starts_with("decade,month,mean_count_per_grid\n"));
}

#[test]
fn evaluate_writes_a_metrics_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--length", "600", "--rate", "0.05", "--out", "d.csv"]);
    fs::write(
        d.join("r.json"),
        r#"[{"feature": "f1", "count": 2, "frequency": 2.0}, {"feature": "f0", "count": 1, "frequency": 1.0}]"#,
    )
    .unwrap();
    fs::write(
        d.join("c.json"),
        r#"{"classifier": {"hidden": [4], "epochs": 2, "batch": 32}}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "--config", "c.json", "evaluate", "--input", "d.csv", "--labels", "d.truth.json", "--ranking", "mine=r.json",
            "--random", "2", "--k", "2", "--out", "m.csv",
        ],
    );
    let text = String::from_utf8(read(d, "m.csv")).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["all-features", "mine", "random-0", "random-1"]);
}
