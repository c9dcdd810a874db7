use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json");

fn qv2x(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qv2x"))
        .args(args)
        .arg("--config")
        .arg(SMOKE)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("qv2x runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = qv2x(out, args);
    assert!(o.status.success(), "qv2x {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(out: &Path, args: &[&str]) -> i32 {
    qv2x(out, args).status.code().expect("exit code")
}

/// Data rows of a stamped CSV as `header -> value` maps.
fn rows(path: &Path) -> Vec<Vec<(String, String)>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# qv2x "), "{} is not stamped", path.display());
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

fn field<'a>(row: &'a [(String, String)], key: &str) -> &'a str {
    &row.iter().find(|(k, _)| k == key).unwrap().1
}

#[test]
fn full_pipeline_produces_every_artifact_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in ["gen", "train", "codebook", "calibrate", "eval-ideal", "eval-system", "report"] {
        ok(out, &[cmd]);
    }
    for f in [
        "scenarios.json",
        "model_fp.bin",
        "model_fp_compressed.bin",
        "codebook.bin",
        "model_joint.bin",
        "model_quant.bin",
        "calibration_report.csv",
        "metrics_ideal.csv",
        "metrics_system.csv",
        "latency_fp_raw.csv",
        "latency_fp_compressed.csv",
        "latency_quant_codebook.csv",
        "summary.md",
        "ap_vs_pose_noise.svg",
        "ap_vs_latency.svg",
        "size_vs_bits.svg",
        "fixtures/eval0_frame0_labels.grid",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let ideal = rows(&out.join("metrics_ideal.csv"));
    assert_eq!(ideal.len(), 3 * 3);
    for r in &ideal {
        let ap: f64 = field(r, "ap").parse().unwrap();
        assert!((0.0..=1.0).contains(&ap));
    }
    let system = rows(&out.join("metrics_system.csv"));
    let names: Vec<&str> = system.iter().map(|r| field(r, "system")).collect();
    assert_eq!(names, ["fp_raw", "fp_compressed", "quant_codebook"]);
    let bytes: Vec<usize> = system.iter().map(|r| field(r, "message_bytes").parse().unwrap()).collect();
    assert!(bytes[2] < bytes[1] && bytes[1] < bytes[0]);

    let before_ideal = fs::read(out.join("metrics_ideal.csv")).unwrap();
    let before_system = fs::read(out.join("metrics_system.csv")).unwrap();
    ok(out, &["eval-ideal"]);
    ok(out, &["eval-system"]);
    assert_eq!(before_ideal, fs::read(out.join("metrics_ideal.csv")).unwrap());
    assert_eq!(before_system, fs::read(out.join("metrics_system.csv")).unwrap());

    let summary = fs::read_to_string(out.join("summary.md")).unwrap();
    assert!(summary.contains("quant_codebook"));
}

#[test]
fn full_precision_widths_reproduce_the_fp_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let set = [
        "--set",
        "calibration.source=\"fp\"",
        "--set",
        "calibration.w_bits=32",
        "--set",
        "calibration.a_bits=32",
        "--set",
        "eval.include_maxmin=false",
    ];
    for cmd in ["gen", "train", "calibrate", "eval-ideal"] {
        let mut args = vec![cmd];
        args.extend_from_slice(&set);
        ok(out, &args);
    }
    let ideal = rows(&out.join("metrics_ideal.csv"));
    for pair in ideal.chunks(2) {
        assert_eq!(field(&pair[0], "model"), "fp");
        assert_eq!(field(&pair[1], "model"), "quant");
        assert_eq!(field(&pair[0], "ap"), field(&pair[1], "ap"));
    }
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    assert_eq!(code(out, &["train"]), 3, "missing scenarios");
    assert_eq!(code(out, &["gen", "--set", "scenes.nonexistent=1"]), 2, "unknown override key");
    assert_eq!(code(out, &["gen", "--set", "calibration.w_bits=0"]), 2, "invalid value");

    ok(out, &["gen"]);
    assert_eq!(code(out, &["train", "--set", "scenes.objects=5"]), 4, "stale scenarios");

    fs::write(out.join("scenarios.json"), b"{ not json").unwrap();
    assert_eq!(code(out, &["train"]), 5, "corrupt scenarios");
}

#[test]
fn config_prints_the_resolved_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = qv2x(dir.path(), &["config", "--seed", "99", "--set", "train.epochs=2"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 99);
    assert_eq!(v["train"]["epochs"], 2);
    assert_eq!(v["model"]["channels"], 8);
}
