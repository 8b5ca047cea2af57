//! End-to-end checks of the command-line surface and its exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .and_then(|p| p.parent())
        .unwrap()
        .to_path_buf()
}

/// Build the binary once (cargo test does not produce bin targets) and
/// return its path.
fn cli_binary() -> PathBuf {
    let root = workspace_root();
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".to_string());
    let build = Command::new(cargo)
        .args(["build", "-p", "ctxmpc", "--bin", "ctxmpc"])
        .current_dir(&root)
        .output()
        .expect("cargo runs");
    assert!(
        build.status.success(),
        "binary build failed:\n{}",
        String::from_utf8_lossy(&build.stderr)
    );
    root.join("target/debug/ctxmpc")
}

fn write_scalar_config(dir: &Path, t_steps: usize, seeds: &[u64]) -> PathBuf {
    let path = dir.join("scalar.json");
    let seeds = serde_json::to_string(seeds).unwrap();
    let config = format!(
        r#"{{
    "version": 1,
    "scenario": {{
        "kind": "custom",
        "a": [[1.0]], "b": [[1.0]], "q": [[1.0]], "r": [[1.0]],
        "disturbance_mean": [0.3], "disturbance_scale": [0.7],
        "embedding_dim": 1, "embedding_scale": 1.0, "radius": 2.0
    }},
    "t_steps": {t_steps},
    "k": 2,
    "seeds": {seeds}
}}"#
    );
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn run_replay_regret_roundtrip() {
    let bin = cli_binary();
    let dir = tempfile::tempdir().unwrap();
    let config = write_scalar_config(dir.path(), 60, &[0]);
    let out = dir.path().join("out");

    // run with a seed-count override: three trace files plus summary.
    let run = Command::new(&bin)
        .args(["run", "--config"])
        .arg(&config)
        .args(["--seeds", "3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let stdout = String::from_utf8_lossy(&run.stdout);
    let digest = stdout
        .lines()
        .find_map(|l| l.strip_prefix("digest "))
        .expect("digest line")
        .trim()
        .to_string();
    let run_dir = out.join(&digest);
    for seed in 0..3 {
        assert!(run_dir.join(format!("seed-{seed}.csv")).exists());
    }
    assert!(run_dir.join("summary.json").exists());
    assert!(run_dir.join("config.json").exists());

    // replay <digest> --root out: byte-identical, exit 0.
    let replay = Command::new(&bin)
        .args(["replay", &digest, "--root"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        replay.status.success(),
        "{}",
        String::from_utf8_lossy(&replay.stderr)
    );
    assert!(String::from_utf8_lossy(&replay.stdout).contains("byte-identical"));

    // regret over the stored run directory: JSON report per seed.
    let report_path = dir.path().join("regret.json");
    let regret = Command::new(&bin)
        .args(["regret", "--run-dir"])
        .arg(&run_dir)
        .args(["--out"])
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(
        regret.status.success(),
        "{}",
        String::from_utf8_lossy(&regret.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let entries = report.as_array().unwrap();
    assert_eq!(entries.len(), 3);
    for entry in entries {
        assert!(entry["report"]["identity_residual"].as_f64().unwrap() <= 1e-6);
    }
}

#[test]
fn sweep_and_robustness_emit_csv() {
    let bin = cli_binary();
    let dir = tempfile::tempdir().unwrap();
    let config = write_scalar_config(dir.path(), 50, &[1]);

    let csv_path = dir.path().join("ld.csv");
    let sweep = Command::new(&bin)
        .args(["sweep-k", "--config"])
        .arg(&config)
        .args(["--kmax", "8", "--out"])
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(
        sweep.status.success(),
        "{}",
        String::from_utf8_lossy(&sweep.stderr)
    );
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("k,ld\n"));
    assert_eq!(csv.lines().count(), 9); // header + 8 rows
    let stdout = String::from_utf8_lossy(&sweep.stdout);
    assert!(stdout.contains("slope"), "{stdout}");

    let rob_path = dir.path().join("robustness.csv");
    let rob = Command::new(&bin)
        .args(["robustness", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&rob_path)
        .output()
        .unwrap();
    assert!(rob.status.success());
    let csv = std::fs::read_to_string(&rob_path).unwrap();
    assert!(csv.starts_with("t,c_norm,b_gap\n"));
    assert!(csv.lines().count() > 3);
}

#[test]
fn exit_codes_distinguish_config_and_runtime_errors() {
    let bin = cli_binary();
    let dir = tempfile::tempdir().unwrap();

    // Missing config file: config error, exit 1.
    let missing = Command::new(&bin)
        .args(["run", "--config", "does-not-exist.json"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));

    // Schema-invalid config: exit 1.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"version": 1, "bogus": true}"#).unwrap();
    let invalid = Command::new(&bin)
        .args(["run", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(invalid.status.code(), Some(1));

    // Unknown flag: usage error, exit 1.
    let usage = Command::new(&bin).args(["run", "--bogus"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));

    // Replay of a nonexistent digest under an existing root: the
    // stored run is missing, exit 1 (config error).
    let replay = Command::new(&bin)
        .args(["replay", "feedbeef", "--root"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(replay.status.code(), Some(1));

    // Help exits 0.
    let help = Command::new(&bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}
