use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_autolambda"))
}

fn write_config(dir: &std::path::Path, json: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, json).unwrap();
    p
}

const SMALL: &str = r#""family": {"kind": "teacher", "num_tasks": 2, "noise_task": false,
    "sizes": {"train": 64, "val": 32, "test": 32}}"#;

#[test]
fn run_succeeds_and_writes_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{{SMALL}, "trainer": {{"steps": 12, "batch_size": 8}}}}"#));
    let out = dir.path().join("out");
    let st = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "5", "--out"])
        .arg(&out)
        .env("AUTOLAMBDA_LOG_LEVEL", "error")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(fs::read_to_string(out.join("trajectory.csv")).unwrap().lines().count(), 13);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("trajectory.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    assert!(summary["wall_clock_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"trainer": {"stepz": 1}}"#);
    let st = bin().args(["run", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn bad_log_level_exits_2() {
    let st = bin()
        .args(["gradcheck"])
        .env("AUTOLAMBDA_LOG_LEVEL", "loud")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn unknown_preset_exits_2() {
    let st = bin().args(["run", "--preset", "nope"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{{SMALL}, "trainer": {{"steps": 300, "batch_size": 8, "lr": 10000.0}}, "strategy": {{"kind": "equal"}}, "eval_every": 1}}"#),
    );
    let out = dir.path().join("out");
    let st = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .env("AUTOLAMBDA_LOG_LEVEL", "error")
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    let text = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(text.starts_with("step,"));
}

#[test]
fn gradcheck_verb_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"gradcheck": {"graphs": 20, "partition_nets": 3}}"#);
    let out = bin()
        .args(["gradcheck", "--jobs", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .env("AUTOLAMBDA_LOG_LEVEL", "error")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 violations"));
}

#[test]
fn grouping_and_compare_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"{{{SMALL}, "trainer": {{"steps": 10, "batch_size": 8}},
            "strategies": [{{"kind": "equal"}}, {{"kind": "equal"}}, {{"kind": "gcs"}}, {{"kind": "dwa"}}]}}"#
        ),
    );
    for verb in ["grouping", "compare", "relmatrix"] {
        let st = bin()
            .args([verb, "--jobs", "2", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path())
            .env("AUTOLAMBDA_LOG_LEVEL", "error")
            .status()
            .unwrap();
        assert_eq!(st.code(), Some(0), "{verb}");
    }
    let g = fs::read_to_string(dir.path().join("grouping.csv")).unwrap();
    assert!(g.starts_with("subset_bitmask,task,metric,delta_pct\n"));
    assert_eq!(g.lines().count(), 1 + 4);
    let r = fs::read_to_string(dir.path().join("relmatrix.csv")).unwrap();
    assert!(r.starts_with("primary_task,task,metric,delta_pct\n"));
    assert_eq!(r.lines().count(), 1 + 4);
    // The same strategy listed twice with one seed gives identical rows.
    let c = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = c.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][2..], rows[2][2..]);
    assert_eq!(rows[1][2..], rows[3][2..]);
}
