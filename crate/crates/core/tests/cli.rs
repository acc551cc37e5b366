//! End-to-end runs of the `mtfuzz` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtfuzz::mtnn::{load_embedding, load_model};
use mtfuzz::orchestrator::{FuzzConfig, COVERAGE_HEADER};

const BIN: &str = env!("CARGO_BIN_EXE_mtfuzz");

fn mtfuzz(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "mtfuzz {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn quick_fuzz(target: &str, out: &Path, extra: &[&str]) -> Output {
    let o = out.to_str().unwrap();
    let mut args = vec![
        "fuzz", "--target", target, "--out", o, "--rounds", "2", "--encoder", "16,8", "--epochs", "5",
        "--round-budget", "1000", "--warmup-execs", "500", "--rng-seed", "7",
    ];
    args.extend_from_slice(extra);
    mtfuzz(&args)
}

#[test]
fn fuzz_export_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = quick_fuzz("builtin:tlv_a", &out, &[]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("2 rounds"));

    for f in ["meta.jsonl", "coverage.csv", "config.json", "summary.json", "model/round_0001.mtfz"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let cfg = FuzzConfig::load(&out.join("config.json")).unwrap();
    assert_eq!((cfg.rounds, cfg.epochs, cfg.encoder_dims.clone()), (2, 5, vec![16, 8]));

    let bundle = dir.path().join("a.mtfe");
    let model = out.join("model/final.mtfz");
    mtfuzz(&["export-embedding", "--model", model.to_str().unwrap(), "--out", bundle.to_str().unwrap()]);
    let b = load_embedding(&bundle).unwrap();
    assert_eq!(b.n_in, 64);
    assert_eq!(b.encoder_dims(), load_model(&model).unwrap().spec.encoder_dims);

    let rep = mtfuzz(&["report", "--out", out.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&rep.stdout).contains(COVERAGE_HEADER));

    // The bundle warms a campaign on the sibling parser.
    let warm = dir.path().join("warm");
    quick_fuzz("builtin:tlv_b", &warm, &["--warm-embedding", bundle.to_str().unwrap()]);
    let csv = fs::read_to_string(warm.join("coverage.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn resume_continues_the_round_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    quick_fuzz("builtin:chain", &out, &[]);
    let o = out.to_str().unwrap();
    // A second plain run into the same dir is refused.
    let again = Command::new(BIN)
        .args(["fuzz", "--target", "builtin:chain", "--out", o])
        .output()
        .unwrap();
    assert!(!again.status.success());
    mtfuzz(&["fuzz", "--out", o, "--resume", "--rounds", "3"]);
    let csv = fs::read_to_string(out.join("coverage.csv")).unwrap();
    let rounds: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rounds, ["1", "2", "3"]);
}

#[test]
fn subprocess_target_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let target = format!("exec:{BIN} ref-child --mode echo");
    quick_fuzz(&target, &out, &["--max-len", "32"]);
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["edges"], 1);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("x");
    let r = Command::new(BIN)
        .args(["fuzz", "--target", "builtin:nope", "--out", o.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error:"));
    let r = Command::new(BIN)
        .args(["fuzz", "--target", "builtin:chain", "--out", o.to_str().unwrap(), "--mode", "fast"])
        .output()
        .unwrap();
    assert!(!r.status.success());
}
