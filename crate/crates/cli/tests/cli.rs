use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 1
method = "clip2fl"

[dataset]
num_classes = 3
input_dim = 4
n_max = 40
imbalance_factor = 8.0
test_per_class = 10
group_thresholds = [20, 8]

[partition]
num_clients = 4

[model]
hidden = [6]
feature_dim = 6

[training]
rounds = 2
epochs = 1

[server]
features_per_class = 4
feature_steps = 3
retrain_steps = 5
"#;

fn fedsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsynth")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_artifacts_and_compare_tabulates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = fedsynth(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("clip2fl seed 1"));
    let out = fedsynth(&["run", "--config", &cfg, "--method", "fedavg", "--seed", "1", "--workers", "2", "--out", b.to_str().unwrap()]);
    assert!(out.status.success());
    for f in ["metrics.jsonl", "final.json", "config.resolved.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["method"], "fedavg");
    assert_eq!(fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().count(), 2);

    let out = fedsynth(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("| clip2fl |") && table.contains("| fedavg |"), "{table}");
}

#[test]
fn partition_report_prints_one_row_per_client() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = fedsynth(&["partition-report", "--config", &cfg]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("client,"));
    let total: usize = lines[1..]
        .iter()
        .flat_map(|l| l.split(',').skip(1))
        .map(|v| v.parse::<usize>().unwrap())
        .sum();
    // 40 * 8^(-c/2) for c = 0, 1, 2
    assert_eq!(total, 40 + 14 + 5);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), &SMALL.replace("rounds = 2", "rounds = 0"));
    let out = fedsynth(&["run", "--config", &bad, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds"));

    let cfg = write_config(dir.path(), SMALL);
    let out = fedsynth(&["run", "--config", &cfg, "--method", "fedprox", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let unknown = write_config(dir.path(), &format!("{SMALL}\n[extra]\nx = 1\n"));
    assert_eq!(fedsynth(&["partition-report", "--config", &unknown]).status.code(), Some(2));
}

#[test]
fn io_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(fedsynth(&["partition-report", "--config", missing.to_str().unwrap()]).status.code(), Some(3));

    let empty_a = dir.path().join("a");
    let empty_b = dir.path().join("b");
    fs::create_dir_all(&empty_a).unwrap();
    fs::create_dir_all(&empty_b).unwrap();
    assert_eq!(fedsynth(&["compare", empty_a.to_str().unwrap(), empty_b.to_str().unwrap()]).status.code(), Some(3));
}
