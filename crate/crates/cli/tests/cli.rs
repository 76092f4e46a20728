use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relab_cli::store::file_sha256;
use relab_cli::{ExperimentConfig, Manifest, RunStatus, EXIT_CONFIG, EXIT_RUNTIME};

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn smoke() -> PathBuf {
    repo_root().join("configs/smoke.toml")
}

fn relab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning relab")
}

fn smoke_run(out: &Path, extra: &[&str]) -> Output {
    let cfg = smoke();
    let mut args = vec!["run", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    relab(&args, out)
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut seen = 0;
    for entry in fs::read_dir(repo_root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
            cfg.validate().unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 2, "only {seen} configs");
}

#[test]
fn full_run_writes_manifest_with_hashes_and_reuses_cache() {
    let dir = tempfile::tempdir().unwrap();
    let out = smoke_run(dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let m = Manifest::load(dir.path()).unwrap();
    assert_eq!(m.status, RunStatus::Ok);
    let names: Vec<&str> = m.stages.iter().map(|s| s.name.as_str()).collect();
    for stage in ["data", "train-eval", "train-decoder", "train-target", "attack", "eval", "analyze"] {
        assert!(names.contains(&stage), "missing stage {stage} in {names:?}");
    }
    assert!(m.stages.iter().all(|s| !s.cached));
    for s in &m.stages {
        assert!(!s.artifacts.is_empty(), "{} has no artifacts", s.name);
        for a in &s.artifacts {
            assert_eq!(file_sha256(&a.path).unwrap(), a.sha256, "{}", a.path.display());
        }
    }
    for f in ["config.toml", "metrics.json", "featspace.json", "projection.csv", "reconstructions/images.bin"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    for key in ["acc", "att_acc", "knn_dist", "ffd", "hull_iou_recon_priv", "provenance"] {
        assert!(metrics.get(key).is_some(), "metrics.json lacks {key}");
    }
    let first = fs::read(dir.path().join("metrics.json")).unwrap();

    let again = smoke_run(dir.path(), &[]);
    assert!(again.status.success());
    let m2 = Manifest::load(dir.path()).unwrap();
    for s in m2.stages.iter().filter(|s| s.key.is_some()) {
        assert!(s.cached, "stage {} was rebuilt", s.name);
    }
    assert_eq!(fs::read(dir.path().join("metrics.json")).unwrap(), first);
}

#[test]
fn until_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    let out = smoke_run(dir.path(), &["--until", "train"]);
    assert!(out.status.success());
    let m = Manifest::load(dir.path()).unwrap();
    assert_eq!(m.stages.last().unwrap().name, "train-target");
    assert!(!dir.path().join("metrics.json").exists());
}

#[test]
fn invalid_policy_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = smoke_run(dir.path(), &["--set", "policy.a_lo=0.6", "--set", "policy.a_hi=0.3"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "repeats = \"three\"").unwrap();
    let out = relab(&["run", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let unknown = relab(&["run", "--set", "nonsense.key=1"], dir.path());
    assert_eq!(unknown.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn stage_failure_marks_manifest_failed() {
    let dir = tempfile::tempdir().unwrap();
    // 12 reconstructions in a 128-wide feature space cannot give a full-rank covariance.
    let out = smoke_run(dir.path(), &["--set", "metrics.shrinkage=\"off\""]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `eval` failed"));
    let m = Manifest::load(dir.path()).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
    assert_eq!(m.failed_stage.as_deref(), Some("eval"));
    assert!(m.error.is_some());
    assert!(dir.path().join("reconstructions/images.bin").exists());
}

#[test]
fn sweep_and_comparison_write_summaries_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let out = relab(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2, "{summary}");
    assert!(dir.path().join("verdict.json").exists());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| NoDefense |") && table.contains("| RE |"), "{table}");

    let cmp_dir = dir.path().join("compare");
    let out = relab(&["compare-schemes", "--config", cfg.to_str().unwrap()], &cmp_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = fs::read_to_string(cmp_dir.join("summary.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 2);
    for label in ["RE", "FE", "EE"] {
        assert!(rows.lines().any(|l| l.starts_with(&format!("{label},"))), "{rows}");
    }

    let report = relab(&["report", "--dir", cmp_dir.to_str().unwrap()], dir.path());
    assert!(cmp_dir.join("report.csv").exists());
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("| EE |"));
}

#[test]
fn deleting_downstream_artifacts_rebuilds_only_those() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke_run(dir.path(), &["--set", "metrics.delta=false"]).status.success());
    let first = Manifest::load(dir.path()).unwrap();
    let attack_key = first.stages.iter().find(|s| s.name == "attack").unwrap().key.clone().unwrap();
    fs::remove_dir_all(dir.path().join("cache").join(&attack_key)).unwrap();
    fs::remove_dir_all(dir.path().join("reconstructions")).unwrap();

    assert!(smoke_run(dir.path(), &["--set", "metrics.delta=false"]).status.success());
    let second = Manifest::load(dir.path()).unwrap();
    for s in &second.stages {
        match s.name.as_str() {
            "data" | "train-eval" | "train-decoder" | "train-target" => assert!(s.cached, "{} rebuilt", s.name),
            "attack" => assert!(!s.cached),
            _ => {}
        }
    }
    let hashes = |m: &Manifest| -> Vec<String> { m.stages.iter().flat_map(|s| s.artifacts.iter().map(|a| a.sha256.clone())).collect() };
    assert_eq!(hashes(&first), hashes(&second));
}
