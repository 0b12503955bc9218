use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{base_loss, LabeledBatch, LossOptions, LossWeights};
use super::model::ToyModel;
use crate::error::{Error, Result};
use crate::prototypes::{ClassId, TaskDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub options: LossOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 0.05,
            batch_size: 32,
            seed: 0,
            options: LossOptions::default(),
        }
    }
}

/// Learning rate scaled by the ratio of new to previously seen classes (unscaled for the
/// first task).
pub fn adaptive_learning_rate(base_lr: f64, new_classes: usize, seen_classes: usize) -> f64 {
    if seen_classes == 0 {
        base_lr
    } else {
        base_lr * new_classes as f64 / seen_classes as f64
    }
}

/// Trains a copy of `model` on one task with `L_ce + λ1·L_kd + λ2·L_scl` and plain SGD.
///
/// The records of `task` carry raw inputs. Head columns for the task's classes are added
/// when missing; the distillation term is active only when `old_model` is given.
pub fn train_task(
    model: &ToyModel,
    old_model: Option<&ToyModel>,
    task: &TaskDataset,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<ToyModel> {
    weights.validate()?;
    if task.records.is_empty() {
        return Err(Error::Empty("task training records"));
    }
    if config.batch_size == 0 || config.base_lr.is_nan() || config.base_lr <= 0.0 {
        return Err(Error::Invalid("batch size and learning rate must be positive".into()));
    }

    let mut model = model.clone();
    let new_classes: Vec<ClassId> = task.class_set.iter().copied().collect();
    if let Some(c) = new_classes.iter().find(|c| model.column_of(**c).is_some()) {
        return Err(Error::Invalid(format!("class {c} was already learned by an earlier task")));
    }
    let seen = model.num_classes();
    model.extend_head(&new_classes, config.seed ^ 0x9e37_79b9)?;
    let lr = adaptive_learning_rate(config.base_lr, new_classes.len(), seen);

    let inputs = DMatrix::from_fn(task.records.len(), model.in_dim(), |i, j| task.records[i].vector[j]);
    if task.records.iter().any(|r| r.dim() != model.in_dim()) {
        return Err(Error::Dimension {
            expected: model.in_dim(),
            found: task.records.iter().map(|r| r.dim()).find(|&d| d != model.in_dim()).unwrap_or(0),
        });
    }
    let labels: Vec<ClassId> = task.records.iter().map(|r| r.class_id).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = LabeledBatch::new(
                inputs.select_rows(chunk.iter()),
                chunk.iter().map(|&i| labels[i]).collect(),
            )?;
            let loss = base_loss(&model, old_model, &batch, weights, &config.options)?;
            if !loss.value.is_finite() {
                return Err(Error::Divergence { step });
            }
            model.sgd_step(&loss.grads, lr);
            if !model.is_finite() {
                return Err(Error::Divergence { step });
            }
            step += 1;
        }
    }
    Ok(model)
}

/// Fraction of records whose head argmax equals the label.
pub fn head_accuracy(model: &ToyModel, records: &[crate::prototypes::FeatureRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("records"));
    }
    let inputs = DMatrix::from_fn(records.len(), model.in_dim(), |i, j| records[i].vector[j]);
    let logits = model.forward(&inputs)?.logits;
    let correct = records
        .iter()
        .enumerate()
        .filter(|(i, r)| {
            let col = logits.row(*i).transpose().argmax().0;
            model.class_ids.get(col) == Some(&r.class_id)
        })
        .count();
    Ok(correct as f64 / records.len() as f64)
}
