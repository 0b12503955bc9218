//! Feature records, per-class prototypes and cosine nearest-class-mean prediction.
//!
//! Prototypes are plain arithmetic means of raw extractor outputs. Normalization only
//! happens inside the cosine computation, never before averaging.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u32;
pub type TaskId = u32;

/// One embedding with its class label and the (1-based) task that introduced the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub vector: DVector<f64>,
    pub class_id: ClassId,
    pub task_id: TaskId,
}

impl FeatureRecord {
    pub fn new(vector: DVector<f64>, class_id: ClassId, task_id: TaskId) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::Empty("feature vector"));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "feature component {i} of class {class_id} is not finite"
            )));
        }
        Ok(Self {
            vector,
            class_id,
            task_id,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Training and test split of one task, plus the classes the task introduces.
///
/// `test_records` holds the test items of every class seen so far, embedded by the
/// task's encoder.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: TaskId,
    pub records: Vec<FeatureRecord>,
    pub test_records: Vec<FeatureRecord>,
    pub class_set: BTreeSet<ClassId>,
}

impl TaskDataset {
    pub fn new(
        task_id: TaskId,
        records: Vec<FeatureRecord>,
        test_records: Vec<FeatureRecord>,
        class_set: BTreeSet<ClassId>,
    ) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| !class_set.contains(&r.class_id)) {
            return Err(Error::Invalid(format!(
                "training record of class {} does not belong to task {task_id}",
                r.class_id
            )));
        }
        Ok(Self {
            task_id,
            records,
            test_records,
            class_set,
        })
    }
}

/// Rejects task class partitions that overlap.
pub fn check_disjoint<'a>(class_sets: impl IntoIterator<Item = &'a BTreeSet<ClassId>>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (t, set) in class_sets.into_iter().enumerate() {
        for &c in set {
            if !seen.insert(c) {
                return Err(Error::Invalid(format!(
                    "class {c} appears in task {} and an earlier task",
                    t + 1
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub prototype: DVector<f64>,
    pub aligned_task: TaskId,
}

/// Class id to prototype map. Iteration order is ascending class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    dim: usize,
    entries: BTreeMap<ClassId, PrototypeEntry>,
}

impl PrototypeTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts or replaces a prototype.
    pub fn insert(&mut self, class_id: ClassId, prototype: DVector<f64>, aligned_task: TaskId) -> Result<()> {
        if prototype.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: prototype.len(),
            });
        }
        if prototype.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "prototype of class {class_id} has non-finite components"
            )));
        }
        self.entries.insert(
            class_id,
            PrototypeEntry {
                prototype,
                aligned_task,
            },
        );
        Ok(())
    }

    pub fn get(&self, class_id: ClassId) -> Option<&PrototypeEntry> {
        self.entries.get(&class_id)
    }

    pub fn prototype(&self, class_id: ClassId) -> Option<&DVector<f64>> {
        self.entries.get(&class_id).map(|e| &e.prototype)
    }

    pub fn contains(&self, class_id: ClassId) -> bool {
        self.entries.contains_key(&class_id)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &PrototypeEntry)> {
        self.entries.iter().map(|(c, e)| (*c, e))
    }

    /// Entries of `other` overwrite entries of `self` with the same class id.
    pub fn merged(&self, other: &PrototypeTable) -> Result<PrototypeTable> {
        if other.dim != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut out = self.clone();
        for (c, e) in other.iter() {
            out.entries.insert(c, e.clone());
        }
        Ok(out)
    }

    /// Sub-table restricted to `classes`; ids not present are skipped.
    pub fn restricted(&self, classes: &BTreeSet<ClassId>) -> PrototypeTable {
        PrototypeTable {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .filter(|(c, _)| classes.contains(c))
                .map(|(c, e)| (*c, e.clone()))
                .collect(),
        }
    }
}

/// Per-class mean of the record vectors.
///
/// `aligned_task` of each class is the largest task id among its records.
pub fn compute_prototypes(records: &[FeatureRecord]) -> Result<PrototypeTable> {
    let first = records.first().ok_or(Error::Empty("prototype records"))?;
    let dim = first.dim();

    let mut acc: BTreeMap<ClassId, (DVector<f64>, usize, TaskId)> = BTreeMap::new();
    for r in records {
        if r.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: r.dim(),
            });
        }
        let slot = acc
            .entry(r.class_id)
            .or_insert_with(|| (DVector::zeros(dim), 0, r.task_id));
        slot.0 += &r.vector;
        slot.1 += 1;
        slot.2 = slot.2.max(r.task_id);
    }

    let mut table = PrototypeTable::new(dim);
    for (class_id, (sum, count, task)) in acc {
        table.insert(class_id, sum / count as f64, task)?;
    }
    Ok(table)
}

/// Cosine similarity; zero-norm inputs are an error since the angle is undefined.
pub fn cosine_similarity(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine with a zero-norm vector".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Class whose prototype has the smallest cosine distance to `feature`.
///
/// Ties go to the smallest class id.
pub fn ncm_predict(feature: &DVector<f64>, prototypes: &PrototypeTable) -> Result<ClassId> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype table"));
    }
    if feature.len() != prototypes.dim() {
        return Err(Error::Dimension {
            expected: prototypes.dim(),
            found: feature.len(),
        });
    }
    let feature_norm = feature.norm();
    if feature_norm == 0.0 {
        return Err(Error::Degenerate("zero-norm feature".into()));
    }

    let mut best: Option<(ClassId, f64)> = None;
    for (class_id, entry) in prototypes.iter() {
        let pn = entry.prototype.norm();
        if pn == 0.0 {
            return Err(Error::Degenerate(format!("zero-norm prototype for class {class_id}")));
        }
        let sim = feature.dot(&entry.prototype) / (feature_norm * pn);
        match best {
            Some((_, s)) if sim <= s => {}
            _ => best = Some((class_id, sim)),
        }
    }
    Ok(best.map(|(c, _)| c).expect("table is non-empty"))
}
