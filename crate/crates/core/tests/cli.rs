use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_midpoint-sampler");

#[test]
fn unknown_config_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"eps": 0.3, "nonsense": true}"#).unwrap();
    let status = Command::new(BIN).args(["sample", "--config"]).arg(&path).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn tiny_batch_is_rejected() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/gmm2.json");
    let out = Command::new(BIN).args(["sample", "--config", cfg, "--n", "10"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("below"));
}

#[test]
fn sample_subcommand_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/kappa4.json");
    let status = Command::new(BIN)
        .args(["sample", "--config", cfg, "--n", "2000", "--eps", "0.5", "--seed", "9", "--workers", "2", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["samples.f64", "metrics.csv", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 9);
    assert_eq!(report["config"]["algorithm"], "logconcave");
}

#[test]
fn bad_algorithm_name_is_a_usage_error() {
    let out = Command::new(BIN).args(["sample", "--algorithm", "leapfrog"]).output().unwrap();
    assert!(!out.status.success());
}
