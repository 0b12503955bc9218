//! Feature streams of a whole task sequence, one embedding set per encoder stage.
//!
//! Stage `t` holds every train and test item of the scenario embedded by the encoder
//! after task `t`. Items appear in the same order at every stage, so the features of one
//! input under two encoders are paired by position.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::{check_disjoint, ClassId, FeatureRecord, TaskDataset, TaskId};
use crate::sim::DriftMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Classes divided equally across tasks.
    Cold,
    /// The first task holds (about) half of the classes.
    Warm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub train: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
}

#[derive(Debug, Clone)]
pub struct StagedScenario {
    dim: usize,
    task_classes: Vec<BTreeSet<ClassId>>,
    class_task: BTreeMap<ClassId, TaskId>,
    stages: Vec<StageFeatures>,
    split: SplitKind,
    /// Ground-truth map of each boundary `t-1 → t` (index `t-2`), when known.
    pub ground_truth: Option<Vec<DriftMap>>,
    /// Classes that form the test stream in the unbalanced regime.
    pub selected_classes: Option<BTreeSet<ClassId>>,
}

impl StagedScenario {
    pub fn new(task_classes: Vec<BTreeSet<ClassId>>, stages: Vec<StageFeatures>, split: SplitKind) -> Result<Self> {
        if task_classes.is_empty() {
            return Err(Error::Empty("task list"));
        }
        if stages.len() != task_classes.len() {
            return Err(Error::Invalid(format!(
                "{} stages for {} tasks",
                stages.len(),
                task_classes.len()
            )));
        }
        check_disjoint(&task_classes)?;
        let class_task: BTreeMap<ClassId, TaskId> = task_classes
            .iter()
            .enumerate()
            .flat_map(|(t, set)| set.iter().map(move |&c| (c, t as TaskId + 1)))
            .collect();

        let dim = stages[0]
            .train
            .first()
            .or(stages[0].test.first())
            .map(|r| r.dim())
            .ok_or(Error::Empty("stage features"))?;
        let layout = &stages[0];
        for (s, stage) in stages.iter().enumerate() {
            if stage.train.len() != layout.train.len() || stage.test.len() != layout.test.len() {
                return Err(Error::Invalid(format!("stage {} has a different item count", s + 1)));
            }
            for (a, b) in stage
                .train
                .iter()
                .zip(&layout.train)
                .chain(stage.test.iter().zip(&layout.test))
            {
                if a.dim() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        found: a.dim(),
                    });
                }
                if a.class_id != b.class_id || a.task_id != b.task_id {
                    return Err(Error::Invalid(format!("stage {} items are not aligned with stage 1", s + 1)));
                }
                match class_task.get(&a.class_id) {
                    Some(&t) if t == a.task_id => {}
                    _ => {
                        return Err(Error::Invalid(format!(
                            "record of class {} claims task {}",
                            a.class_id, a.task_id
                        )))
                    }
                }
            }
        }
        Ok(Self {
            dim,
            task_classes,
            class_task,
            stages,
            split,
            ground_truth: None,
            selected_classes: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tasks(&self) -> usize {
        self.task_classes.len()
    }

    pub fn split(&self) -> SplitKind {
        self.split
    }

    /// Classes introduced by task `t` (1-based).
    pub fn task_classes(&self, t: usize) -> &BTreeSet<ClassId> {
        &self.task_classes[t - 1]
    }

    pub fn all_task_classes(&self) -> &[BTreeSet<ClassId>] {
        &self.task_classes
    }

    /// `C_{1:t}`
    pub fn seen_classes(&self, t: usize) -> BTreeSet<ClassId> {
        self.task_classes[..t].iter().flatten().copied().collect()
    }

    pub fn task_of(&self, class_id: ClassId) -> Option<TaskId> {
        self.class_task.get(&class_id).copied()
    }

    /// Features under the encoder of stage `t` (1-based).
    pub fn stage(&self, t: usize) -> &StageFeatures {
        &self.stages[t - 1]
    }

    pub fn stages(&self) -> &[StageFeatures] {
        &self.stages
    }

    /// Test item positions whose class is in `classes`, in item order.
    pub fn test_indices(&self, classes: &BTreeSet<ClassId>) -> Vec<usize> {
        self.stages[0]
            .test
            .iter()
            .enumerate()
            .filter(|(_, r)| classes.contains(&r.class_id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Train item positions whose class is in `classes`.
    pub fn train_indices(&self, classes: &BTreeSet<ClassId>) -> Vec<usize> {
        self.stages[0]
            .train
            .iter()
            .enumerate()
            .filter(|(_, r)| classes.contains(&r.class_id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Task `t` as seen by its own encoder: its training records and the test records
    /// of every class seen so far.
    pub fn task_dataset(&self, t: usize) -> Result<TaskDataset> {
        let stage = self.stage(t);
        let own = self.task_classes(t);
        let seen = self.seen_classes(t);
        TaskDataset::new(
            t as TaskId,
            stage.train.iter().filter(|r| own.contains(&r.class_id)).cloned().collect(),
            stage.test.iter().filter(|r| seen.contains(&r.class_id)).cloned().collect(),
            own.clone(),
        )
    }

    /// Copy with every feature rounded through 32-bit floats.
    pub fn quantized_f32(&self) -> Self {
        let mut out = self.clone();
        for stage in &mut out.stages {
            for r in stage.train.iter_mut().chain(stage.test.iter_mut()) {
                r.vector.apply(|v| *v = *v as f32 as f64);
            }
        }
        out
    }
}

/// Equal class split across `num_tasks` tasks.
pub fn cold_split(num_classes: usize, num_tasks: usize) -> Result<Vec<usize>> {
    if num_tasks == 0 || !num_classes.is_multiple_of(num_tasks) {
        return Err(Error::Invalid(format!(
            "{num_classes} classes cannot be split equally into {num_tasks} tasks"
        )));
    }
    Ok(vec![num_classes / num_tasks; num_tasks])
}

/// Large first task followed by `incremental_tasks` equal tasks.
///
/// The first task takes half of the classes when the remainder divides evenly; otherwise
/// each incremental task takes `ceil(half / incremental_tasks)` classes and the first task
/// takes the rest (100 classes over 20 increments gives 40 + 20×3).
pub fn warm_split(num_classes: usize, incremental_tasks: usize) -> Result<Vec<usize>> {
    if incremental_tasks == 0 {
        return Err(Error::Invalid("warm start needs at least one incremental task".into()));
    }
    let half = num_classes / 2;
    let per_task = half.div_ceil(incremental_tasks);
    let first = num_classes
        .checked_sub(per_task * incremental_tasks)
        .filter(|&f| f > 0)
        .ok_or_else(|| Error::Invalid(format!("{num_classes} classes too few for {incremental_tasks} increments")))?;
    let mut split = vec![first];
    split.extend(std::iter::repeat_n(per_task, incremental_tasks));
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn splits() {
        assert_eq!(cold_split(100, 10).unwrap(), vec![10; 10]);
        assert!(cold_split(100, 3).is_err());
        assert_eq!(warm_split(100, 10).unwrap()[0], 50);
        let w = warm_split(100, 20).unwrap();
        assert_eq!(w[0], 40);
        assert_eq!(w.len(), 21);
        assert!(w[1..].iter().all(|&c| c == 3));
        assert_eq!(w.iter().sum::<usize>(), 100);
    }

    fn rec(c: ClassId, t: TaskId, v: f64) -> FeatureRecord {
        FeatureRecord::new(dvector![v, 1.0], c, t).unwrap()
    }

    #[test]
    fn rejects_overlapping_tasks_and_misaligned_stages() {
        let stage = StageFeatures {
            train: vec![rec(0, 1, 1.0), rec(1, 2, 2.0)],
            test: vec![rec(1, 2, 3.0)],
        };
        let tasks = vec![BTreeSet::from([0]), BTreeSet::from([1])];
        assert!(StagedScenario::new(tasks.clone(), vec![stage.clone(), stage.clone()], SplitKind::Cold).is_ok());

        let overlapping = vec![BTreeSet::from([0, 1]), BTreeSet::from([1])];
        assert!(StagedScenario::new(overlapping, vec![stage.clone(), stage.clone()], SplitKind::Cold).is_err());

        let mut shifted = stage.clone();
        shifted.train.swap(0, 1);
        assert!(StagedScenario::new(tasks, vec![stage, shifted], SplitKind::Cold).is_err());
    }
}
