//! Task sequence embedded by successively trained toy encoders.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::LossWeights;
use super::model::ToyModel;
use super::train::{train_task, TrainConfig};
use crate::error::{Error, Result};
use crate::prototypes::{ClassId, FeatureRecord, TaskDataset, TaskId};
use crate::scenario::{SplitKind, StageFeatures, StagedScenario};
use crate::sim::partition_classes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScenarioSpec {
    pub classes_per_task: Vec<usize>,
    pub split: SplitKind,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Norm of each class mean in input space.
    pub input_separation: f64,
    pub input_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ToyScenarioSpec {
    fn default() -> Self {
        Self {
            classes_per_task: vec![4, 4, 4],
            split: SplitKind::Cold,
            in_dim: 10,
            hidden_dim: 32,
            feature_dim: 16,
            input_separation: 4.0,
            input_std: 1.0,
            train_per_class: 40,
            test_per_class: 20,
            weights: LossWeights::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyScenario {
    pub scenario: StagedScenario,
    /// Model after each task, in task order.
    pub models: Vec<ToyModel>,
}

type RawItem = (ClassId, TaskId, DVector<f64>);

/// Trains one model per task on Gaussian input blobs and embeds every train and test item
/// with each snapshot.
pub fn train_toy_scenario(spec: &ToyScenarioSpec) -> Result<ToyScenario> {
    if spec.classes_per_task.is_empty() || spec.classes_per_task.contains(&0) {
        return Err(Error::Invalid("every task needs at least one class".into()));
    }
    if spec.train_per_class == 0 {
        return Err(Error::Invalid("train_per_class must be positive".into()));
    }
    let tasks = partition_classes(&spec.classes_per_task);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.in_dim;

    let mut train: Vec<RawItem> = Vec::new();
    let mut test: Vec<RawItem> = Vec::new();
    for (t, set) in tasks.iter().enumerate() {
        for &c in set {
            let dir = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mean = dir.normalize() * spec.input_separation;
            for (count, out) in [(spec.train_per_class, &mut train), (spec.test_per_class, &mut test)] {
                for _ in 0..count {
                    let noise = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    out.push((c, t as TaskId + 1, &mean + noise * spec.input_std));
                }
            }
        }
    }

    let mut model = ToyModel::new(d, spec.hidden_dim, spec.feature_dim, spec.seed.wrapping_add(1))?;
    let mut models = Vec::with_capacity(tasks.len());
    let mut stages = Vec::with_capacity(tasks.len());
    for (t, set) in tasks.iter().enumerate() {
        let records = train
            .iter()
            .filter(|(c, _, _)| set.contains(c))
            .map(|(c, task, x)| FeatureRecord::new(x.clone(), *c, *task))
            .collect::<Result<Vec<_>>>()?;
        let dataset = TaskDataset::new(t as TaskId + 1, records, Vec::new(), set.clone())?;
        let config = TrainConfig {
            seed: spec.train.seed.wrapping_add(t as u64),
            ..spec.train.clone()
        };
        let old = models.last();
        model = train_task(&model, old, &dataset, &spec.weights, &config)?;
        stages.push(StageFeatures {
            train: embed(&model, &train)?,
            test: embed(&model, &test)?,
        });
        models.push(model.clone());
    }

    let scenario = StagedScenario::new(tasks, stages, spec.split)?;
    Ok(ToyScenario { scenario, models })
}

fn embed(model: &ToyModel, items: &[RawItem]) -> Result<Vec<FeatureRecord>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = nalgebra::DMatrix::from_fn(items.len(), model.in_dim(), |i, j| items[i].2[j]);
    let features = model.features(&inputs)?;
    items
        .iter()
        .enumerate()
        .map(|(i, (c, t, _))| FeatureRecord::new(features.row(i).transpose(), *c, *t))
        .collect()
}
