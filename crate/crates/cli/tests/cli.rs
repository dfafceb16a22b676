use std::path::Path;
use std::process::Command;

fn ffl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ffl"))
}

fn config_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_into(dir: &Path) -> std::process::Output {
    ffl()
        .args(["run", "--config"])
        .arg(config_path("two_agent_gamma.json"))
        .arg("--out")
        .arg(dir)
        .args(["--seed", "11", "--threads", "2"])
        .output()
        .unwrap()
}

#[test]
fn run_is_reproducible_and_writes_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = run_into(a.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_into(b.path()).status.success());
    let csv_a = std::fs::read(a.path().join("results.csv")).unwrap();
    let csv_b = std::fs::read(b.path().join("results.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let text = String::from_utf8(csv_a).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("grid_index,sweep_value,repetition,seed,mechanism,agent,payment"));
    // 6 gamma values x 3 repetitions x (oracle + 3 mechanisms x (2 agents + aggregate))
    assert_eq!(text.lines().count(), 1 + 6 * 3 * 10);
    assert!(text.lines().any(|l| l.contains(",ffl,aggregate,")));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 11);
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 18);
    assert!(manifest["errors"].as_array().unwrap().is_empty());
    assert!(manifest["timing"]["wall_time_secs"].is_number());
    assert_eq!(manifest["config"]["sweep"]["variable"], "gamma");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"scenario": {"kind": "two_agent", "n1": 5, "n2": 5, "mean": 0.1},
            "mechanisms": ["ffl"], "sweep": {"variable": "gamma", "values": []}}"#,
    )
    .unwrap();
    let out = ffl().args(["run", "--config"]).arg(&bad).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));

    let out = ffl().args(["run", "--config"]).arg(dir.path().join("missing.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn planners_print_json() {
    let out = ffl().args(["plan", "--theorem", "1"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["config"]["t2"].is_u64());

    let out = ffl().args(["plan", "--theorem", "3", "--k", "30", "--epsilon", "0.5"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["L"].as_u64().unwrap() >= 1);

    let out = ffl().args(["plan", "--theorem", "prop9", "--k", "10"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["plan"]["bound"].as_f64().unwrap() > 0.0);

    // T2 above its admissible interval.
    let out = ffl()
        .args(["plan", "--theorem", "1", "--k", "2", "--mu", "0.1", "--l-f", "5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
