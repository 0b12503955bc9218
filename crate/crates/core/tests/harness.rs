use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use semevo_core::harness::{
    self, emit_results, replay_audit, results, run_gd_oracle, run_scenario, Engine, RunConfig, SolverKind,
};
use semevo_core::sim::DriftKind;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small() -> RunConfig {
    RunConfig {
        num_classes: 12,
        num_tasks: 3,
        dim: 8,
        cluster_separation: 1.0,
        cluster_std: 0.2,
        train_per_class: 15,
        test_per_class: 8,
        queue_capacity: 200,
        ..RunConfig::new()
    }
}

#[test]
fn compensation_is_a_no_op_without_drift() {
    let base = RunConfig {
        drift_kind: DriftKind::Identity,
        ..small()
    };
    let scenario = harness::build_scenario(&base, 0).unwrap();
    let none = run_scenario(&scenario, &RunConfig { solver: SolverKind::None, ..base.clone() }, 0).unwrap();
    let analytic = run_scenario(&scenario, &base, 0).unwrap();
    assert_eq!(none.metrics.per_task_accuracy, analytic.metrics.per_task_accuracy);
    let oracle = run_gd_oracle(&scenario, &base, 0).unwrap();
    assert_eq!(none.metrics.per_task_accuracy, oracle.metrics.per_task_accuracy);
}

#[test]
fn tasks_must_run_in_order() {
    let cfg = small();
    let scenario = harness::build_scenario(&cfg, 0).unwrap();
    let mut engine = Engine::new(&scenario, &cfg, 0).unwrap();
    assert!(engine.run_task_cycle(2).is_err());
    engine.run_task_cycle(1).unwrap();
    assert!(engine.run_task_cycle(1).is_err());
    engine.run_task_cycle(2).unwrap();
}

#[test]
fn empty_run_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_results(dir.path(), &[]).unwrap();
    let text = fs::read_to_string(&files.results).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().next().unwrap(), results::RESULTS_VERSION_LINE);
    assert!(results::read_results(&files.results).unwrap().is_empty());
}

#[test]
fn seeds_aggregate_to_mean_and_spread() {
    let cfg = RunConfig {
        seeds: vec![0, 1],
        ..small()
    };
    let records = harness::run_seeds(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_results(dir.path(), &records).unwrap();
    let rows = results::report(&[dir.path().to_path_buf()], &dir.path().join("report")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].runs, 2);
    let (a, b) = (records[0].last_accuracy, records[1].last_accuracy);
    assert!((rows[0].last_accuracy_mean - (a + b) / 2.0).abs() < 1e-12);
    assert!((rows[0].last_accuracy_std - (a - b).abs() / 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn golden_config_is_deterministic_and_replayable() {
    let cfg = RunConfig::load(&configs_dir().join("golden.toml")).unwrap();
    let emit = || {
        let dir = tempfile::tempdir().unwrap();
        let records = harness::run_seeds(&cfg).unwrap();
        emit_results(dir.path(), &records).unwrap();
        let read = |name: &str| fs::read(dir.path().join(name)).unwrap();
        (read("results.csv"), read("task_accuracy.csv"), read("curves.csv"), read("aggregate.csv"))
    };
    assert_eq!(emit(), emit());

    let outcome = harness::run_once(&cfg, 0).unwrap();
    let audit = replay_audit(&harness::build_scenario(&cfg, 0).unwrap(), &outcome).unwrap();
    assert!(audit.reproduced);
    assert_eq!(audit.mismatches, 0);
    assert_eq!(audit.per_task_accuracy, outcome.metrics.per_task_accuracy);
}

#[test]
fn linear_fit_leaves_residual_under_warped_drift() {
    let cfg = RunConfig {
        drift_kind: DriftKind::Nonlinear,
        drift_warp: 0.5,
        ..small()
    };
    let m = harness::run_once(&cfg, 0).unwrap().metrics;
    assert!(m.final_residual.unwrap() > 1e-6);
    let linear = harness::run_once(&small(), 0).unwrap().metrics;
    assert!(linear.final_residual.unwrap() < m.final_residual.unwrap());
}

#[test]
fn capacity_sweep_labels_rows() {
    let values = ["20".to_string(), "100".to_string()];
    let records = harness::run_sweep(&small(), "queue_capacity", &values).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|m| m.sweep_key == "queue_capacity"));
    assert_ne!(records[0].config_hash, records[1].config_hash);
    assert!(harness::run_sweep(&small(), "no_such_key", &values).is_err());
}

fn semevo(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_semevo")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    fs::write(p("old.toml"), "num_tasks = 3\n").unwrap();
    assert_eq!(semevo(&["run", &p("old.toml")]).0, 3);
    assert_eq!(semevo(&["run", &p("missing.toml")]).0, 6);
    fs::write(p("junk.fdump"), b"not a dump at all, clearly").unwrap();
    let (code, err) = semevo(&["ingest-check", &p("junk.fdump")]);
    assert_eq!(code, 4);
    assert!(err.contains("dump error 10"));

    fs::write(
        p("tiny.toml"),
        "version = 1\nnum_classes = 6\nnum_tasks = 2\ndim = 4\ntrain_per_class = 8\ntest_per_class = 4\nqueue_capacity = 50\n",
    )
    .unwrap();
    assert_eq!(semevo(&["run", &p("tiny.toml"), "--out", &p("out")]).0, 0);
    assert!(dir.path().join("out/results.csv").exists());
    assert_eq!(semevo(&["gen", &p("tiny.toml"), "--out", &p("dump")]).0, 0);
    assert_eq!(semevo(&["ingest-check", &p("dump/stage_2.fdump")]).0, 0);
    assert_eq!(semevo(&["report", &p("out"), "--out", &p("report")]).0, 0);
}
