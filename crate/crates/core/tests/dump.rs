use std::fs;
use std::io::Write;

use semevo_core::error::{DumpError, Error};
use semevo_core::harness::{self, dump, FeaturePrecision, RunConfig, SourceKind};

fn toy_config() -> RunConfig {
    RunConfig {
        source: SourceKind::Toy,
        num_classes: 9,
        num_tasks: 3,
        dim: 8,
        hidden_dim: 16,
        train_per_class: 20,
        test_per_class: 8,
        epochs: 5,
        queue_capacity: 200,
        feature_precision: FeaturePrecision::F32,
        ..RunConfig::new()
    }
}

#[test]
fn stage_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = harness::build_scenario(&toy_config(), 0).unwrap();
    let paths = dump::write_scenario(dir.path(), &scenario).unwrap();
    assert_eq!(paths.len(), 3);
    for (t, path) in paths.iter().enumerate() {
        let (stage, summary) = dump::read_stage(path).unwrap();
        assert_eq!(&stage, scenario.stage(t + 1));
        assert_eq!(summary.header.dim, 8);
        assert_eq!(summary.train, stage.train.len());
    }
    let first = fs::read(&paths[0]).unwrap();
    dump::write_stage(&dir.path().join("again.fdump"), scenario.stage(1)).unwrap();
    assert_eq!(first, fs::read(dir.path().join("again.fdump")).unwrap());
}

#[test]
fn truncated_dump_names_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = harness::build_scenario(&toy_config(), 0).unwrap();
    let path = dir.path().join("stage.fdump");
    dump::write_stage(&path, scenario.stage(1)).unwrap();
    let bytes = fs::read(&path).unwrap();
    let cut = bytes.len() - 5;
    fs::File::create(&path).unwrap().write_all(&bytes[..cut]).unwrap();
    match dump::read_stage(&path) {
        Err(Error::Dump(DumpError::Truncated { offset, .. })) => {
            assert!(offset <= cut as u64 && offset > cut as u64 - 64);
        }
        other => panic!("expected a truncation error, got {other:?}"),
    }
}

#[test]
fn dumped_scenario_reproduces_the_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config();
    let scenario = harness::build_scenario(&config, 0).unwrap();
    let paths = dump::write_scenario(dir.path(), &scenario).unwrap();
    let from_dump = RunConfig {
        source: SourceKind::Dump,
        dump_paths: paths,
        ..config.clone()
    };
    let a = harness::run_once(&config, 0).unwrap().metrics;
    let b = harness::run_once(&from_dump, 0).unwrap().metrics;
    assert_eq!(a.per_task_accuracy, b.per_task_accuracy);
    assert_eq!(a.class_accuracy, b.class_accuracy);
    assert_eq!(a.final_residual, b.final_residual);
}

#[test]
fn missing_stage_file_is_an_io_error() {
    let config = RunConfig {
        source: SourceKind::Dump,
        dump_paths: vec!["/nonexistent/stage_1.fdump".into()],
        ..RunConfig::new()
    };
    let err = harness::build_scenario(&config, 0).unwrap_err();
    assert_eq!(err.category().exit_code(), 6);
}
