use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_heishom");

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn heishom(config: &Path, out: &Path, threads: usize) -> std::process::Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .output()
        .unwrap()
}

const SMALL: &str = r#"{
  "experiment": "twoscale",
  "trajectory": {"total_steps": 200000, "burn_in_steps": 10000},
  "cell": {"h": 0.5},
  "params": {"epsilon_ladder": [1.0, 0.3], "delta_ladder": [0.4, 0.1]},
  "pde": {"dx": 0.1},
  "twoscale": {"n_samples": 300, "corrector_h": 0.5}
}"#;

#[test]
fn boundary_rate_fails_with_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"params": {"k1": 4.0}}"#);
    let out = heishom(&cfg, &dir.path().join("out"), 1);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(
        String::from_utf8_lossy(&out.stderr),
        "params: k1 > 4 required\n"
    );
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"experiment": "ergodic", "extra": 1}"#);
    let out = heishom(&cfg, &dir.path().join("out"), 1);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("config: unknown field `extra`"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(heishom(&cfg, &a, 1).status.code().is_some());
    assert!(heishom(&cfg, &b, 4).status.code().is_some());
    for name in ["twoscale.csv", "twoscale.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["schema_version"], 1);
    assert!(meta["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c.get("measured").is_some()));
}

#[test]
fn ergodic_writes_the_moment_table_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"experiment": "ergodic", "trajectory": {"total_steps": 200000, "burn_in_steps": 10000}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = heishom(&cfg, &out_dir, 2);
    assert!(out.status.code() == Some(0) || out.status.code() == Some(1));
    let table = fs::read_to_string(out_dir.join("moments.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("statistic,estimate,std_error,effective_samples")
    );
    assert_eq!(lines.count(), 6);
    let cached = fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("mu_moments_")
        })
        .count();
    assert_eq!(cached, 1);
}

#[test]
fn cached_moments_match_a_fresh_estimate() {
    // "effective" alone after "ergodic" reads the cache; a clean directory
    // estimates afresh. Both must give the same table.
    let dir = tempfile::tempdir().unwrap();
    let traj = r#""trajectory": {"total_steps": 200000, "burn_in_steps": 10000}"#;
    let pde = r#""pde": {"dx": 0.1}, "stabilization": {"replicas": 200, "t_end": 1.0}"#;
    let ergodic = write_config(
        dir.path(),
        &format!(r#"{{"experiment": "ergodic", {traj}}}"#),
    );
    let shared = dir.path().join("shared");
    heishom(&ergodic, &shared, 2);
    let effective = dir.path().join("effective.json");
    fs::write(
        &effective,
        format!(r#"{{"experiment": "effective", {traj}, {pde}}}"#),
    )
    .unwrap();
    heishom(&effective, &shared, 2);
    let fresh = dir.path().join("fresh");
    heishom(&effective, &fresh, 3);
    assert_eq!(
        fs::read(shared.join("effective.csv")).unwrap(),
        fs::read(fresh.join("effective.csv")).unwrap()
    );
}
