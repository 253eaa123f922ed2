use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn tow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tow")).args(args).output().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("check_linear.toml");
    let out = tow(&[
        "train",
        "--config",
        path_str(&cfg),
        "--override",
        "training.meta_iterations=2",
        "--override",
        "evaluation.n_tasks=10",
        "--out",
        path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.toml", "metrics.csv", "curve.csv", "params.json", "summary.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    // header + T·M rows per iteration
    assert_eq!(metrics.lines().count(), 1 + 2 * 3 * 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());

    let params = dir.path().join("params.json");
    let ev = tow(&["eval", "--config", path_str(&cfg), "--params", path_str(&params), "--n-tasks", "10"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[training]\nhorizon = 0\n").unwrap();
    let out = tow(&["train", "--config", path_str(&bad), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let unknown = tow(&["train", "--config", path_str(&config("check_linear.toml")), "--strategy", "greedy"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn check_subcommand() {
    let ok = tow(&["check", "--config", path_str(&config("check_linear.toml"))]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let too_big = tow(&["check", "--config", path_str(&config("reference_sine.toml")), "--what", "gradients"]);
    assert_eq!(too_big.status.code(), Some(1));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = tow(&[
        "sweep",
        "--config",
        path_str(&config("check_linear.toml")),
        "--override",
        "training.meta_iterations=1",
        "--override",
        "evaluation.n_tasks=10",
        "--key",
        "tow.beta_u",
        "--values",
        "1.0,100.0",
        "--out",
        path_str(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}
