use std::path::Path;
use std::process::{Command, Output};

use betaat::attacks::{AttackConfig, AttackKind};
use betaat::models::{Model, ModelSpec};
use betaat_harness::bench::bench_attacks;
use betaat_harness::datasets::{generate_dataset, DatasetSpec};

fn betaat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_betaat")).args(args).output().unwrap()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn exit_codes() {
    assert_eq!(betaat(&["train", "--config", "missing.json"]).status.code(), Some(2));
    assert_eq!(betaat(&["unknown"]).status.code(), Some(2));
    assert_eq!(betaat(&[]).status.code(), Some(2));
    assert_eq!(betaat(&["repro", "appendix-d"]).status.code(), Some(0));
    assert_eq!(betaat(&["repro", "example-1"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let missing = betaat(&["attack", "--out", &out]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("last.json"));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"train": {"epochs": 2, "learning_rate": 1}}"#).unwrap();
    let r = betaat(&["train", "--config", path.to_str().unwrap(), "--out", &out_arg(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("learning_rate"));
}

#[test]
fn train_writes_every_artifact_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let r = betaat(&["train", "--epochs", "2", "--steps", "2", "--out", &out]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8(r.stdout).unwrap();
    let echoed = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert!(stdout.starts_with(&echoed));
    for f in ["metrics.csv", "metrics.json", "best.json", "last.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let cfg = dir.path().join("config.json");
    let again = betaat(&["eval", "--config", cfg.to_str().unwrap(), "--format", "json"]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    let grid: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(grid.as_array().unwrap().len(), 2 * 3);

    let oracle = betaat(&["oracle", "--out", &out, "--resolution", "5"]);
    assert_eq!(oracle.status.code(), Some(0), "{}", String::from_utf8_lossy(&oracle.stderr));
}

#[test]
fn gradcheck_command_passes() {
    let r = betaat(&["gradcheck", "--points", "3"]);
    assert_eq!(r.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("objective,wrt,max_rel_error,checks"));
}

#[test]
fn attack_cost_scales_with_steps_and_classes() {
    let data = generate_dataset(&DatasetSpec { n: 300, ..DatasetSpec::default() }).unwrap();
    let model = Model::init(ModelSpec::mlp(2, vec![16], 3), 1).unwrap();
    let rows = bench_attacks(
        &model,
        &data,
        &AttackConfig::default(),
        &[AttackKind::Pgd, AttackKind::Beta],
        &[0, 20, 40],
        5,
    )
    .unwrap();
    let t = |kind: &str, steps: usize| rows.iter().find(|r| r.attack == kind && r.steps == steps).unwrap().seconds;
    // BETA runs one ascent per off-true class.
    let per_class = t("beta", 40) / t("pgd", 40) / 2.0;
    assert!((0.5..=2.0).contains(&per_class), "{per_class}");
    let doubling = t("pgd", 40) / t("pgd", 20);
    assert!((1.3..=3.0).contains(&doubling), "{doubling}");
    assert!(t("pgd", 0) < t("pgd", 40) / 4.0);
}
