use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_covap-sim"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn plan_counts_effective_tensors() {
    let o = run(&[
        "plan",
        "--config",
        config("vgg19-shard.json").to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["interval"], 19);
    assert_eq!(v["bucket_count"], 6);
    assert_eq!(v["effective_tensors"], 20);
}

#[test]
fn profile_recommends_interval() {
    let o = run(&[
        "profile",
        "--config",
        config("resnet101.json").to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["profile"]["recommended_interval"], 3);
    assert!((v["profile"]["ccr"].as_f64().unwrap() - 2.074).abs() < 1e-3);
}

#[test]
fn simulate_writes_identical_artifacts_twice() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("fig11-scaling.json");
    let mut listings = Vec::new();
    for (i, par) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let o = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--sweep-parallel",
            par,
            "--format",
            "csv",
        ]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(stdout(&o).contains("scheme,interval,workers"));
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        listings.push(files);
    }
    let names: Vec<_> = listings[0].iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "breakdown.csv",
            "report.json",
            "sweep.csv",
            "trace.chrome.json",
            "trace.csv"
        ]
    );
    assert_eq!(listings[0], listings[1]);
}

#[test]
fn config_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        "{\n  \"name\": \"x\",\n  \"cluster\": {\"workers\": -3, \"bandwidth_gbps\": 1}\n}\n",
    )
    .unwrap();
    let o = run(&["plan", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("cluster.workers"), "{err}");
    assert!(err.contains("line 3"), "{err}");

    let o = run(&[
        "plan",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_step_training_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    std::fs::write(
        &path,
        r#"{"name": "zero", "compressor": {"scheme": "none"},
        "train": {"objective": "logistic-regression", "dim": 8, "workers": 2, "samples_per_worker": 8, "steps": 0, "lr": 0.1}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(out.join("train.csv")).unwrap(),
        "step,loss,bytes\n"
    );
}

#[test]
fn divergence_exits_3_after_writing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    std::fs::write(
        &path,
        r#"{"name": "boom", "compressor": {"scheme": "none"},
        "train": {"objective": "linear-regression", "dim": 16, "workers": 2, "samples_per_worker": 32, "steps": 500, "lr": 40.0}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(3));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("train.json")).unwrap()).unwrap();
    assert_eq!(summary["run"]["diverged"], true);
    assert_eq!(summary["provenance"]["seed"], 4);
}
