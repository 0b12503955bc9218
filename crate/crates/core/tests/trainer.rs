mod common;

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::Rng;
use semevo_core::prototypes::{FeatureRecord, TaskDataset};
use semevo_core::trainer::{
    head_accuracy, train_task, train_toy_scenario, LossWeights, ToyModel, ToyScenarioSpec, TrainConfig,
};

fn blobs(seed: u64, classes: &[u32], task: u32, separation: f64) -> TaskDataset {
    let mut r = common::rng(seed);
    let mut records = Vec::new();
    for &c in classes {
        let mut center = DVector::zeros(10);
        center[c as usize % 10] = separation;
        for _ in 0..30 {
            let noise = DVector::from_fn(10, |_, _| r.random_range(-1.0..1.0) * 3f64.sqrt());
            records.push(FeatureRecord::new(&center + noise, c, task).unwrap());
        }
    }
    TaskDataset::new(task, records, Vec::new(), classes.iter().copied().collect::<BTreeSet<_>>()).unwrap()
}

fn no_extras() -> LossWeights {
    LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        ..LossWeights::default()
    }
}

#[test]
fn separable_blobs_are_learned() {
    let task = blobs(1, &[0, 1, 2, 3], 1, 6.0);
    let model = ToyModel::new(10, 32, 16, 0).unwrap();
    let trained = train_task(&model, None, &task, &no_extras(), &TrainConfig::default()).unwrap();
    let acc = head_accuracy(&trained, &task.records).unwrap();
    assert!(acc > 0.95, "training accuracy {acc}");
}

#[test]
fn distillation_limits_extractor_drift() {
    let first = blobs(2, &[0, 1, 2], 1, 6.0);
    let second = blobs(3, &[3, 4, 5], 2, 6.0);
    let m1 = train_task(&ToyModel::new(10, 32, 16, 0).unwrap(), None, &first, &no_extras(), &TrainConfig::default())
        .unwrap();
    // Plain SGD at the default rate is unstable with a distillation weight of 1e4.
    let config = TrainConfig {
        base_lr: 1e-5,
        ..TrainConfig::default()
    };
    let drift = |lambda1: f64| {
        let weights = LossWeights {
            lambda1,
            ..no_extras()
        };
        let m2 = train_task(&m1, Some(&m1), &second, &weights, &config).unwrap();
        m2.extractor_distance(&m1)
    };
    let (free, held) = (drift(0.0), drift(1e4));
    assert!(held < free, "distilled drift {held} vs free drift {free}");
}

#[test]
fn sequence_emits_a_snapshot_per_task() {
    let spec = ToyScenarioSpec {
        classes_per_task: vec![3, 3],
        train_per_class: 20,
        test_per_class: 5,
        ..ToyScenarioSpec::default()
    };
    let toy = train_toy_scenario(&spec).unwrap();
    assert_eq!(toy.models.len(), 2);
    assert_eq!(toy.models[0].num_classes(), 3);
    assert_eq!(toy.models[1].num_classes(), 6);
    assert!(toy.models[1].extractor_distance(&toy.models[0]) > 0.0);
    let restored = ToyModel::from_json(&toy.models[1].to_json().unwrap()).unwrap();
    assert_eq!(restored, toy.models[1]);
    assert_eq!(toy.scenario.stage(2).train.len(), 6 * 20);
    assert_eq!(toy.scenario.stage(2).test.len(), 6 * 5);
    assert_eq!(toy.scenario.dim(), 16);

    let again = train_toy_scenario(&spec).unwrap();
    assert_eq!(again.models, toy.models);
    assert_eq!(again.scenario.stage(2), toy.scenario.stage(2));
}

#[test]
fn relearning_a_class_is_rejected() {
    let task = blobs(4, &[0, 1], 1, 6.0);
    let m = train_task(&ToyModel::new(10, 8, 4, 0).unwrap(), None, &task, &no_extras(), &TrainConfig::default()).unwrap();
    assert!(train_task(&m, Some(&m), &task, &no_extras(), &TrainConfig::default()).is_err());
}

#[test]
fn corrupted_snapshot_rejected() {
    let m = ToyModel::new(4, 3, 2, 0).unwrap();
    let json = m.to_json().unwrap();
    assert!(ToyModel::from_json(&json.replace("semevo-toy-model/1", "other/9")).is_err());
    assert!(ToyModel::from_json("{").is_err());
}
