//! Synthetic task sequences with known feature drift.
//!
//! Classes are isotropic Gaussian clusters. At every task boundary all features, old
//! classes' held-out test items included, go through a ground-truth drift map, so the
//! quality of any drift estimate can be measured exactly.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::{ClassId, FeatureRecord, PrototypeTable, TaskId};
use crate::scenario::{SplitKind, StageFeatures, StagedScenario};

pub const DEFAULT_CONDITION_BOUND: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Identity,
    /// Random orthogonal map, `magnitude` controls the rotation angle.
    Rotation,
    /// `scale` times a random rotation.
    ScaledRotation,
    /// `I + magnitude·G` with Gaussian `G`, rejected above the condition bound.
    GeneralAffine,
    /// A general linear map followed by an additive `warp·sin(z)` perturbation.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub kind: DriftKind,
    pub magnitude: f64,
    pub scale: f64,
    pub warp: f64,
    pub observation_noise: f64,
    pub condition_bound: f64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            kind: DriftKind::Identity,
            magnitude: 0.0,
            scale: 1.0,
            warp: 0.0,
            observation_noise: 0.0,
            condition_bound: DEFAULT_CONDITION_BOUND,
        }
    }
}

impl DriftSpec {
    pub fn new(kind: DriftKind, magnitude: f64) -> Self {
        Self {
            kind,
            magnitude,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.magnitude >= 0.0
            && self.observation_noise >= 0.0
            && self.warp >= 0.0
            && self.scale > 0.0
            && self.condition_bound >= 1.0;
        if !ok {
            return Err(Error::Invalid(format!("invalid drift spec {self:?}")));
        }
        Ok(())
    }
}

/// Ground-truth drift of one boundary in row convention: `z ↦ z·M + warp·sin(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMap {
    pub matrix: DMatrix<f64>,
    pub warp: f64,
}

impl DriftMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            warp: 0.0,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.warp == 0.0
    }

    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = self.matrix.tr_mul(z);
        if self.warp != 0.0 {
            out += z.map(f64::sin) * self.warp;
        }
        out
    }

    pub fn condition_number(&self) -> f64 {
        matrix_condition(&self.matrix)
    }

    /// Draws a map of the given kind.
    pub fn sample(spec: &DriftSpec, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let linear = |kind: DriftKind, rng: &mut dyn rand::RngCore| -> Result<DMatrix<f64>> {
            match kind {
                DriftKind::Identity => Ok(DMatrix::identity(dim, dim)),
                DriftKind::Rotation => Ok(cayley_rotation(dim, spec.magnitude, rng)),
                DriftKind::ScaledRotation => Ok(cayley_rotation(dim, spec.magnitude, rng) * spec.scale),
                DriftKind::GeneralAffine | DriftKind::Nonlinear => {
                    for _ in 0..1000 {
                        let g = gaussian_matrix(dim, dim, rng) / (dim as f64).sqrt();
                        let m = DMatrix::identity(dim, dim) + g * spec.magnitude;
                        if matrix_condition(&m) <= spec.condition_bound {
                            return Ok(m);
                        }
                    }
                    Err(Error::Invalid(format!(
                        "no drift matrix with condition <= {} at magnitude {}",
                        spec.condition_bound, spec.magnitude
                    )))
                }
            }
        };
        let matrix = linear(spec.kind, rng)?;
        let warp = if spec.kind == DriftKind::Nonlinear { spec.warp } else { 0.0 };
        Ok(Self { matrix, warp })
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut dyn rand::RngCore) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Orthogonal matrix `(I − K)(I + K)⁻¹` from a random skew-symmetric `K` of scale `magnitude`.
fn cayley_rotation(dim: usize, magnitude: f64, rng: &mut dyn rand::RngCore) -> DMatrix<f64> {
    let g = gaussian_matrix(dim, dim, rng);
    let k = (&g - g.transpose()) * (magnitude / (2.0 * (dim as f64).sqrt()));
    let eye = DMatrix::<f64>::identity(dim, dim);
    let inv = (&eye + &k).try_inverse().expect("I + K is invertible for skew-symmetric K");
    (&eye - &k) * inv
}

fn matrix_condition(m: &DMatrix<f64>) -> f64 {
    let s = SymmetricEigen::new(m.tr_mul(m)).eigenvalues;
    let (min, max) = (s.min(), s.max());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        (max / min).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TestBalance {
    Balanced,
    /// Only a random `fraction` of all classes feed the test stream.
    Subset { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub num_tasks: usize,
    pub num_classes: usize,
    pub classes_per_task: Vec<usize>,
    pub split: SplitKind,
    pub dim: usize,
    /// Norm of each class mean.
    pub cluster_separation: f64,
    /// Per-component standard deviation within a class.
    pub cluster_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// One spec per boundary, or a single spec reused at every boundary.
    pub drift_schedule: Vec<DriftSpec>,
    pub test_balance: TestBalance,
    pub seed: u64,
}

impl SyntheticScenario {
    fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.dim == 0 {
            return Err(Error::Invalid("scenario needs at least one task and a positive dimension".into()));
        }
        if self.classes_per_task.len() != self.num_tasks {
            return Err(Error::Invalid(format!(
                "{} class counts for {} tasks",
                self.classes_per_task.len(),
                self.num_tasks
            )));
        }
        if self.classes_per_task.iter().sum::<usize>() != self.num_classes {
            return Err(Error::Invalid(format!(
                "class counts sum to {}, expected {}",
                self.classes_per_task.iter().sum::<usize>(),
                self.num_classes
            )));
        }
        if self.classes_per_task.contains(&0) {
            return Err(Error::Invalid("every task needs at least one class".into()));
        }
        if self.train_per_class == 0 {
            return Err(Error::Invalid("train_per_class must be positive".into()));
        }
        let boundaries = self.num_tasks - 1;
        if boundaries > 0 && self.drift_schedule.len() != 1 && self.drift_schedule.len() != boundaries {
            return Err(Error::Invalid(format!(
                "drift schedule has {} entries for {boundaries} boundaries",
                self.drift_schedule.len()
            )));
        }
        if let TestBalance::Subset { fraction } = self.test_balance {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Invalid(format!("subset fraction {fraction} outside (0, 1]")));
            }
        }
        if !(self.cluster_separation > 0.0 && self.cluster_std >= 0.0) {
            return Err(Error::Invalid("cluster separation must be positive".into()));
        }
        Ok(())
    }

    fn drift_for(&self, boundary: usize) -> &DriftSpec {
        if self.drift_schedule.len() == 1 {
            &self.drift_schedule[0]
        } else {
            &self.drift_schedule[boundary]
        }
    }
}

/// Class ids per task, numbered consecutively from 0.
pub fn partition_classes(classes_per_task: &[usize]) -> Vec<BTreeSet<ClassId>> {
    let mut next = 0u32;
    classes_per_task
        .iter()
        .map(|&n| {
            let set = (next..next + n as u32).collect();
            next += n as u32;
            set
        })
        .collect()
}

/// Generated scenario plus its ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    pub scenario: StagedScenario,
    /// Map of boundary `t-1 → t` at index `t-2`.
    pub drift_maps: Vec<DriftMap>,
    pub class_means: BTreeMap<ClassId, DVector<f64>>,
}

pub fn generate_scenario(spec: &SyntheticScenario) -> Result<GeneratedScenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let tasks = partition_classes(&spec.classes_per_task);

    let mut class_means = BTreeMap::new();
    for &c in tasks.iter().flatten() {
        let dir = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        class_means.insert(c, dir.normalize() * spec.cluster_separation);
    }

    let mut base_train = Vec::new();
    let mut base_test = Vec::new();
    for (t, set) in tasks.iter().enumerate() {
        for &c in set {
            let mean = &class_means[&c];
            for (count, out) in [(spec.train_per_class, &mut base_train), (spec.test_per_class, &mut base_test)] {
                for _ in 0..count {
                    let noise = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    out.push((c, t as TaskId + 1, mean + noise * spec.cluster_std));
                }
            }
        }
    }

    let mut drift_maps = Vec::with_capacity(spec.num_tasks.saturating_sub(1));
    for b in 0..spec.num_tasks.saturating_sub(1) {
        drift_maps.push(DriftMap::sample(spec.drift_for(b), d, &mut rng)?);
    }

    let mut clean_train: Vec<DVector<f64>> = base_train.iter().map(|(_, _, v)| v.clone()).collect();
    let mut clean_test: Vec<DVector<f64>> = base_test.iter().map(|(_, _, v)| v.clone()).collect();
    let mut stages = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        if t > 0 {
            let map = &drift_maps[t - 1];
            for v in clean_train.iter_mut().chain(clean_test.iter_mut()) {
                *v = map.apply(v);
            }
        }
        let noise = if t > 0 { spec.drift_for(t - 1).observation_noise } else { 0.0 };
        let mut emit = |items: &[(ClassId, TaskId, DVector<f64>)], clean: &[DVector<f64>]| -> Result<Vec<FeatureRecord>> {
            items
                .iter()
                .zip(clean)
                .map(|((c, task, _), v)| {
                    let v = if noise > 0.0 {
                        v + DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)) * noise
                    } else {
                        v.clone()
                    };
                    FeatureRecord::new(v, *c, *task)
                })
                .collect()
        };
        let train = emit(&base_train, &clean_train)?;
        let test = emit(&base_test, &clean_test)?;
        stages.push(StageFeatures { train, test });
    }

    let mut scenario = StagedScenario::new(tasks, stages, spec.split)?;
    if let TestBalance::Subset { fraction } = spec.test_balance {
        let mut all: Vec<ClassId> = class_means.keys().copied().collect();
        all.shuffle(&mut rng);
        let keep = ((all.len() as f64 * fraction).round() as usize).max(1);
        scenario.selected_classes = Some(all[..keep].iter().copied().collect());
    }
    scenario.ground_truth = Some(drift_maps.clone());
    Ok(GeneratedScenario {
        scenario,
        drift_maps,
        class_means,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftSimilarity {
    pub similarity: f64,
    /// Set when either drift vector has zero length; the similarity is then 1 by convention.
    pub zero_drift: bool,
}

/// Cosine similarity between estimated and true drift vectors, per class, both measured
/// from the same pre-drift reference prototypes.
pub fn true_drift_similarity(
    reference: &PrototypeTable,
    estimated: &PrototypeTable,
    true_drifted: &PrototypeTable,
) -> Result<BTreeMap<ClassId, DriftSimilarity>> {
    let keys: Vec<ClassId> = estimated.classes().collect();
    if keys != true_drifted.classes().collect::<Vec<_>>() {
        return Err(Error::Invalid("estimated and true prototype tables have different classes".into()));
    }
    let mut out = BTreeMap::new();
    for c in keys {
        let base = reference.prototype(c).ok_or(Error::MissingClass(c))?;
        let est = estimated.prototype(c).expect("key listed") - base;
        let truth = true_drifted.prototype(c).expect("key checked") - base;
        let (ne, nt) = (est.norm(), truth.norm());
        let entry = if ne == 0.0 || nt == 0.0 {
            DriftSimilarity {
                similarity: 1.0,
                zero_drift: true,
            }
        } else {
            DriftSimilarity {
                similarity: est.dot(&truth) / (ne * nt),
                zero_drift: false,
            }
        };
        out.insert(c, entry);
    }
    Ok(out)
}
