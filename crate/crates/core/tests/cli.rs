use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cavecop::Scenario;
use tempfile::TempDir;

fn cavecop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cavecop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn generate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec!["generate", "--seed", "3", "--out", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = cavecop(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

const SMALL: &[&str] = &[
    "--set", "videos=5",
    "--set", "fanouts=2,2",
    "--set", "tier_storage_videos=2,1",
    "--set", "users_per_edge=3",
    "--set", "duration_ticks=60",
    "--set", "placement_apply_tick=20",
];

const TINY: &[&str] = &[
    "--set", "videos=1",
    "--set", "bitrates_mbps=2.5,4.5,9",
    "--set", "fanouts=2",
    "--set", "tier_storage_videos=1",
    "--set", "users_per_edge=2",
];

#[test]
fn help_lists_overrides_and_exits_zero() {
    let o = cavecop(&["simulate", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("cave_h0"));
    assert!(text.contains("Exit codes"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let scenario = generate(dir.path(), "s.json", SMALL);
    let s = scenario.to_str().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["simulate", "--scenario", s, "--out", out, "--policy", "nosuch"],
        vec!["simulate", "--scenario", s, "--out", out, "--policy", "cavecop", "--set", "bogus=1"],
        vec!["simulate", "--scenario", s, "--out", out, "--policy", "cavecop", "--set", "videos=3"],
        vec!["solve-cave", "--scenario", s, "--out", out, "--set", "cave_h0"],
    ] {
        assert_eq!(cavecop(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn missing_scenario_exits_three() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.json");
    let o = cavecop(&["oracle", "--scenario", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_scenario_exits_four() {
    let dir = TempDir::new().unwrap();
    let path = generate(dir.path(), "s.json", SMALL);
    let mut scenario = Scenario::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
    scenario.topology.links[0].capacity_mbps = -1.0;
    let bad = dir.path().join("bad.json");
    fs::write(&bad, scenario.to_json()).unwrap();
    let out = dir.path().join("o");
    let o = cavecop(&["solve-cave", "--scenario", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{ not json").unwrap();
    let o = cavecop(&["oracle", "--scenario", garbage.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    let o = cavecop(&["oracle", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "oversized instance is rejected");
}

#[test]
fn generate_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let a = generate(dir.path(), "a.json", SMALL);
    let b = generate(dir.path(), "b.json", SMALL);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn simulate_writes_metrics_and_manifest() {
    let dir = TempDir::new().unwrap();
    let scenario = generate(dir.path(), "s.json", SMALL);
    let out = dir.path().join("sim");
    let o = cavecop(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--policy",
        "CaVeCoP",
        "--out",
        out.to_str().unwrap(),
        "--dump-lambda",
        "--set",
        "cave_h0=0.2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("policy=cavecop"));
    let csv = fs::read_to_string(out.join("metrics_cavecop.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("tick,time_s,policy,total_utility,pct_stall,lambda_0"));
    assert_eq!(csv.lines().count(), 61);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["overrides"]["cave_h0"], "0.2");
}

#[test]
fn solve_cop_has_at_most_one_fractional_row_per_cache() {
    let dir = TempDir::new().unwrap();
    let scenario = generate(dir.path(), "s.json", SMALL);
    let out = dir.path().join("cop");
    let o = cavecop(&["solve-cop", "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(out.join("placement.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["cache_id", "video_id", "version_id", "p_prime", "p_rounded"]
    );
    let mut fractional: BTreeMap<u64, usize> = BTreeMap::new();
    for row in reader.records() {
        let row = row.unwrap();
        let p: f64 = row[3].parse().unwrap();
        if p > 0.0 && p < 1.0 {
            *fractional.entry(row[0].parse().unwrap()).or_default() += 1;
        }
    }
    assert!(fractional.values().all(|&n| n <= 1), "{fractional:?}");
    assert!(out.join("cop_trace.csv").exists());
}

#[test]
fn solve_cave_writes_trace() {
    let dir = TempDir::new().unwrap();
    let scenario = generate(dir.path(), "s.json", SMALL);
    let out = dir.path().join("cave");
    let o = cavecop(&[
        "solve-cave",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--iterations",
        "50",
        "--placement",
        "cav",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("D_lambda="));
    let trace = fs::read_to_string(out.join("cave_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);
}

#[test]
fn oracle_reports_optimum_on_tiny_scenario() {
    let dir = TempDir::new().unwrap();
    let scenario = generate(dir.path(), "tiny.json", TINY);
    let o = cavecop(&["oracle", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let field = |key: &str| -> f64 {
        text.split_whitespace()
            .find_map(|t| t.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .unwrap()
    };
    assert!(field("lp_bound=") >= field("integer_optimum=") - 1e-6);
}

#[test]
fn compare_emits_every_policy() {
    let dir = TempDir::new().unwrap();
    let scenario = generate(dir.path(), "s.json", SMALL);
    let out = dir.path().join("cmp");
    let o = cavecop(&["compare", "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for slug in ["cavecop", "cavecav", "greedycop"] {
        assert!(out.join(format!("metrics_{slug}.csv")).exists());
        assert!(stdout(&o).contains(slug));
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 3);
}
