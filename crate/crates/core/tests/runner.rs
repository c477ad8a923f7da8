use std::path::{Path, PathBuf};

use fabricnet::config::ScenarioConfig;
use fabricnet::runner::{compare, run, Command, RunOptions, MANIFEST_FILE};

fn scenario(name: &str) -> (ScenarioConfig, String) {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    let text = std::fs::read_to_string(&p).unwrap();
    (ScenarioConfig::parse(&text).unwrap(), text)
}

fn tmp(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("fabricnet-runner-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

#[test]
fn offload_rows_per_policy_and_seed() {
    let (cfg, text) = scenario("reference");
    let dir = tmp("offload");
    let opts = RunOptions {
        seeds: vec![1, 2],
        policies: vec!["oracle".into(), "reactive".into(), "knn".into()],
        threads: 2,
        ..Default::default()
    };
    let m = run(&cfg, &text, Command::Offload, &opts, &dir).unwrap();
    assert_eq!(m.status, "ok");
    let csv = std::fs::read_to_string(dir.join("offload_metrics.csv")).unwrap();
    assert!(csv.starts_with("# schema: offload-metrics v1"));
    assert_eq!(csv.lines().count(), 2 + 6);
    let c = compare(&[csv], &["policy".into()]).unwrap();
    let names: Vec<_> = c.groups.iter().map(|g| g.group.as_str()).collect();
    assert_eq!(names, ["knn", "oracle", "reactive"]);
    assert_eq!(c.groups[1].metrics["failures"].mean, 0.0);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn failed_run_still_writes_manifest() {
    let (cfg, text) = scenario("reference");
    let dir = tmp("fail");
    let opts = RunOptions { seeds: vec![1], policies: vec!["nope".into()], ..Default::default() };
    assert!(run(&cfg, &text, Command::Offload, &opts, &dir).is_err());
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("\"status\": \"error\""));
    // A scenario without the section fails the same way.
    assert!(run(&cfg, &text, Command::Monitor, &RunOptions { seeds: vec![1], ..Default::default() }, &dir).is_err());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let (cfg, text) = scenario("locate_multiwall");
    let (a, b) = (tmp("a"), tmp("b"));
    let base = RunOptions { seeds: vec![4, 5, 6], ..Default::default() };
    run(&cfg, &text, Command::Locate, &RunOptions { threads: 1, ..base.clone() }, &a).unwrap();
    run(&cfg, &text, Command::Locate, &RunOptions { threads: 3, ..base }, &b).unwrap();
    for f in ["positioning_errors.csv", "positioning_summary.csv", "rem_fusion.csv", MANIFEST_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let _ = std::fs::remove_dir_all(&a);
    let _ = std::fs::remove_dir_all(&b);
}
