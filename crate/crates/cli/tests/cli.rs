use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuralmerger"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Two quickly trained small models on distinct synthetic tasks.
fn two_models(dir: &Path) {
    for (name, family, seed) in [("a", "bars", "0"), ("b", "shapes", "1")] {
        let data = format!("synthetic:{family}");
        ok(
            dir,
            &[
                "train-baseline", "--data", &data, "--epochs", "2", "--train-size", "200",
                "--test-size", "100", "--seed", seed, "--out", &format!("{name}.nmj"),
            ],
        );
    }
}

#[test]
fn lenet_accu_merge_reports_configured_r_and_c() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (name, seed) in [("a", "0"), ("b", "1")] {
        ok(
            d,
            &[
                "train-baseline", "--arch", "lenet", "--data", "synthetic:bars", "--input", "28x28x1",
                "--epochs", "0", "--train-size", "8", "--test-size", "8", "--seed", seed,
                "--out", &format!("{name}.nmj"),
            ],
        );
    }
    std::fs::write(
        d.join("accu.json"),
        r#"{"conv1": {"r": 1, "C": 64}, "conv2": {"r": 8, "C": 128}, "fc1": {"r": 8, "C": 128}}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "merge", "--models", "a.nmj", "b.nmj", "--params", "accu.json", "--restarts", "1",
            "--max-iters", "3", "--out", "m.nmj",
        ],
    );
    let text = ok(d, &["inspect", "--model", "m.nmj"]);
    assert!(text.contains("conv1 (conv): r=1 C=64"), "{text}");
    assert!(text.contains("conv2 (conv): r=8 C=128"), "{text}");
    assert!(text.contains("fc1 (fc): r=8 C=128"), "{text}");

    let json: serde_json::Value = serde_json::from_str(&ok(d, &["inspect", "--model", "m.nmj", "--json"])).unwrap();
    assert_eq!(json["params"]["conv2"], serde_json::json!({"r": 8, "C": 128}));
    assert_eq!(json["provenance"]["command"], "merge");
    assert_eq!(json["provenance"]["config"]["kmeans"]["restarts"], 1);
    assert_eq!(json["provenance"]["originals"], serde_json::json!(["a.nmj", "b.nmj"]));
}

#[test]
fn lossless_merge_has_zero_drop() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    two_models(d);
    ok(d, &["merge", "--models", "a.nmj", "b.nmj", "--lossless", "2", "--out", "l.nmj"]);
    for (task, data) in [("A", "synthetic:bars"), ("B", "synthetic:shapes")] {
        let text = ok(d, &["eval", "--model", "l.nmj", "--task", task, "--data", data, "--test-size", "100"]);
        assert!(text.contains("drop 0.00%"), "{text}");
    }
}

#[test]
fn merge_and_finetune_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    two_models(d);
    std::fs::write(d.join("params.json"), r#"{"default": {"r": 4, "C": 16}}"#).unwrap();
    let merge = ["merge", "--models", "a.nmj", "b.nmj", "--params", "params.json", "--restarts", "2"];
    ok(d, &[&merge[..], &["--out", "m1.nmj"]].concat());
    ok(d, &[&merge[..], &["--out", "m2.nmj"]].concat());
    assert_eq!(std::fs::read(d.join("m1.nmb")).unwrap(), std::fs::read(d.join("m2.nmb")).unwrap());

    let tune = [
        "finetune", "--merged", "m1.nmj", "--data-a", "synthetic:bars", "--data-b", "synthetic:shapes",
        "--train-size", "100", "--epochs", "1", "--fraction", "0.5",
    ];
    ok(d, &[&tune[..], &["--out", "t1.nmj"]].concat());
    // Rerun from the saved config alone.
    ok(d, &["finetune", "--config", "t1.config.json", "--out", "t2.nmj"]);
    assert_eq!(std::fs::read(d.join("t1.nmb")).unwrap(), std::fs::read(d.join("t2.nmb")).unwrap());
    let log = std::fs::read_to_string(d.join("t1.log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss_a,loss_b,accuracy_a,accuracy_b,mismatch"), "{log}");
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn pipeline_eval_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    two_models(d);
    std::fs::write(d.join("params.json"), r#"{"default": {"r": 4, "C": 16}}"#).unwrap();
    ok(d, &["merge", "--models", "a.nmj", "b.nmj", "--params", "params.json", "--out", "m.nmj"]);
    let text = ok(d, &["eval", "--model", "m.nmj", "--task", "a", "--data", "synthetic:bars", "--test-size", "50"]);
    assert!(text.starts_with("a: accuracy ") && text.contains("reference"), "{text}");
    let text = ok(d, &["eval", "--model", "a.nmj", "--data", "synthetic:bars:test", "--json", "--test-size", "50"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["accuracy"].as_f64().unwrap() >= 0.0 && v["drop_points"].is_null());

    ok(
        d,
        &[
            "bench", "--merged", "m.nmj", "--repetitions", "30", "--warmup", "1", "--inputs", "1",
            "--calibration-iterations", "10000", "--out", "report",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report/report.json")).unwrap()).unwrap();
    assert_eq!(report["repetitions"], 30);
    assert!(report["whole_model"]["speedup"].as_f64().unwrap() > 0.0);
    assert!(d.join("report/report.md").exists());
}

#[test]
fn errors_are_single_line_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["eval", "--model", "missing.nmj", "--data", "synthetic:bars"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));

    let out = run(d, &["train-baseline", "--data", "csv:nope", "--out", "x.nmj"]);
    assert_eq!(out.status.code(), Some(1));

    two_models(d);
    ok(d, &["merge", "--models", "a.nmj", "b.nmj", "--lossless", "2", "--out", "l.nmj"]);
    let out = run(
        d,
        &[
            "finetune", "--merged", "l.nmj", "--data-a", "synthetic:bars", "--data-b", "synthetic:shapes",
            "--train-size", "100", "--lr", "1e300", "--epochs", "1", "--out", "t.nmj",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
