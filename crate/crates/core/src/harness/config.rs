//! Run configuration read from flat TOML files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::projector::{AnalyticOptions, GdOptimizer, GdOptions, SingularPolicy};
use crate::scenario::{cold_split, warm_split, SplitKind};
use crate::sim::{DriftKind, DriftSpec, SyntheticScenario, TestBalance};
use crate::trainer::{LossOptions, LossWeights, SclDenominator, ToyScenarioSpec, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic,
    Toy,
    Dump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Stale old prototypes.
    None,
    Analytic,
    /// Gradient steps on the current sample only.
    Gd,
    /// Gradient steps on the whole queue.
    GdWithQueue,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::None => "none",
            SolverKind::Analytic => "analytic",
            SolverKind::Gd => "gd",
            SolverKind::GdWithQueue => "gd_with_queue",
        }
    }

    pub fn uses_queue(self) -> bool {
        matches!(self, SolverKind::Analytic | SolverKind::GdWithQueue)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Plain,
    Adam,
}

impl OptimizerKind {
    pub fn optimizer(self) -> GdOptimizer {
        match self {
            OptimizerKind::Plain => GdOptimizer::Plain,
            OptimizerKind::Adam => GdOptimizer::adam(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdInit {
    Identity,
    /// The projector fitted on the task's training pairs.
    Trained,
    /// Seeded uniform entries in `±1/√d`, like a freshly initialized linear layer.
    Random,
}

/// How the training-stage projector (used to map pseudo-features) is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainProjector {
    Identity,
    /// Closed-form fit on the paired training features of the current task.
    Analytic,
    /// `train_projector_steps` Adam steps at `train_projector_lr` from the identity.
    Gd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePrecision {
    F64,
    /// Round features through 32-bit floats, as a dump round trip does.
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub source: SourceKind,

    pub num_classes: usize,
    pub num_tasks: usize,
    pub split: SplitKind,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fraction of classes forming the test stream; absent for a balanced stream.
    pub test_subset_fraction: Option<f64>,
    /// Fixes the scenario across run seeds when set.
    pub scenario_seed: Option<u64>,

    pub dim: usize,
    pub cluster_separation: f64,
    pub cluster_std: f64,
    pub drift_kind: DriftKind,
    pub drift_magnitude: f64,
    pub drift_scale: f64,
    pub drift_warp: f64,
    pub observation_noise: f64,
    pub condition_bound: f64,

    pub in_dim: usize,
    pub hidden_dim: usize,
    pub input_separation: f64,
    pub input_std: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub kd_renormalize: bool,
    pub scl_normalize: bool,
    pub scl_denominator: SclDenominator,

    pub dump_paths: Vec<PathBuf>,

    pub solver: SolverKind,
    pub queue_capacity: usize,
    pub noise_scale: f64,
    pub update_stride: usize,
    pub resolve_stride: usize,
    pub predict_before_update: bool,
    pub ridge: f64,
    pub min_ridge: f64,
    pub condition_threshold: f64,
    pub singular_policy: SingularPolicy,
    pub affine_projector: bool,
    pub gd_learning_rate: f64,
    pub gd_steps: usize,
    pub gd_optimizer: OptimizerKind,
    pub gd_init: GdInit,
    pub train_projector: TrainProjector,
    pub train_projector_steps: usize,
    pub train_projector_lr: f64,
    pub oracle_max_steps: usize,
    pub oracle_tolerance: f64,

    pub shuffle_test: bool,
    /// Cap on streamed test items per class and task.
    pub max_test_per_class: Option<usize>,
    pub feature_precision: FeaturePrecision,
    pub replay_audit: bool,
    pub curve_points: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let proj = AnalyticOptions::default();
        let loss = LossOptions::default();
        let weights = LossWeights::default();
        let train = TrainConfig::default();
        Self {
            version: 0,
            source: SourceKind::Synthetic,
            num_classes: 100,
            num_tasks: 10,
            split: SplitKind::Cold,
            train_per_class: 50,
            test_per_class: 50,
            test_subset_fraction: None,
            scenario_seed: None,
            dim: 32,
            cluster_separation: 6.0,
            cluster_std: 1.0,
            drift_kind: DriftKind::GeneralAffine,
            drift_magnitude: 0.5,
            drift_scale: 1.0,
            drift_warp: 0.0,
            observation_noise: 0.0,
            condition_bound: crate::sim::DEFAULT_CONDITION_BOUND,
            in_dim: 10,
            hidden_dim: 32,
            input_separation: 4.0,
            input_std: 1.0,
            epochs: train.epochs,
            base_lr: train.base_lr,
            batch_size: train.batch_size,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            tau: weights.tau,
            kd_renormalize: loss.kd_renormalize,
            scl_normalize: loss.scl_normalize,
            scl_denominator: loss.scl_denominator,
            dump_paths: Vec::new(),
            solver: SolverKind::Analytic,
            queue_capacity: crate::queue::DEFAULT_CAPACITY,
            noise_scale: crate::queue::DEFAULT_NOISE_SCALE,
            update_stride: 1,
            resolve_stride: 1,
            predict_before_update: false,
            ridge: proj.ridge,
            min_ridge: proj.min_ridge,
            condition_threshold: proj.condition_threshold,
            singular_policy: proj.singular_policy,
            affine_projector: false,
            gd_learning_rate: crate::projector::DEFAULT_GD_LEARNING_RATE,
            gd_steps: 5,
            gd_optimizer: OptimizerKind::Plain,
            gd_init: GdInit::Identity,
            train_projector: TrainProjector::Analytic,
            train_projector_steps: 200,
            train_projector_lr: crate::projector::DEFAULT_GD_LEARNING_RATE,
            oracle_max_steps: 200_000,
            oracle_tolerance: 1e-10,
            shuffle_test: true,
            max_test_per_class: None,
            feature_precision: FeaturePrecision::F64,
            replay_audit: false,
            curve_points: 20,
            seeds: vec![0],
            output_dir: PathBuf::from("results"),
        }
    }
}

fn check(ok: bool, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(message()))
    }
}

impl RunConfig {
    /// Defaults with the version key set, for building configs in code.
    pub fn new() -> Self {
        Self {
            version: CONFIG_VERSION,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            for p in &mut cfg.dump_paths {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    /// Copy with one key replaced; `value` is parsed as a TOML value, falling back to a
    /// bare string.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Serialize(e.to_string()))?;
        if !table.contains_key(key) && !OPTIONAL_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.version == CONFIG_VERSION, || {
            format!("config `version` must be {CONFIG_VERSION} (found {})", self.version)
        })?;
        check(self.num_tasks >= 1, || "num_tasks must be at least 1".into())?;
        check(self.train_per_class >= 1, || "train_per_class must be at least 1".into())?;
        check(self.queue_capacity >= 1, || "queue_capacity must be positive".into())?;
        check(self.noise_scale >= 0.0 && self.noise_scale.is_finite(), || {
            "noise_scale must be finite and >= 0".into()
        })?;
        check(self.update_stride >= 1 && self.resolve_stride >= 1, || {
            "update_stride and resolve_stride must be at least 1".into()
        })?;
        check(self.ridge >= 0.0 && self.min_ridge > 0.0, || {
            "ridge must be >= 0 and min_ridge > 0".into()
        })?;
        check(self.condition_threshold > 1.0, || "condition_threshold must exceed 1".into())?;
        check(self.gd_learning_rate > 0.0 && self.train_projector_lr > 0.0, || {
            "learning rates must be positive".into()
        })?;
        check(self.oracle_tolerance >= 0.0, || "oracle_tolerance must be >= 0".into())?;
        if let Some(f) = self.test_subset_fraction {
            check(f > 0.0 && f <= 1.0, || format!("test_subset_fraction {f} outside (0, 1]"))?;
        }
        if let Some(k) = self.max_test_per_class {
            check(k >= 1, || "max_test_per_class must be at least 1".into())?;
        }
        check(!self.seeds.is_empty(), || "at least one seed is required".into())?;
        check(self.curve_points >= 1, || "curve_points must be at least 1".into())?;
        match self.source {
            SourceKind::Synthetic => {
                check(self.dim >= 1, || "dim must be positive".into())?;
                check(self.cluster_separation > 0.0 && self.cluster_std >= 0.0, || {
                    "cluster_separation must be positive and cluster_std >= 0".into()
                })?;
                self.classes_per_task()?;
            }
            SourceKind::Toy => {
                check(self.in_dim >= 1 && self.hidden_dim >= 1 && self.dim >= 1, || {
                    "toy model sizes must be positive".into()
                })?;
                check(self.base_lr > 0.0 && self.batch_size >= 1, || {
                    "base_lr and batch_size must be positive".into()
                })?;
                self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
                self.classes_per_task()?;
            }
            SourceKind::Dump => check(!self.dump_paths.is_empty(), || {
                "dump source needs dump_paths (one file per stage)".into()
            })?,
        }
        Ok(())
    }

    pub fn classes_per_task(&self) -> Result<Vec<usize>> {
        let split = match self.split {
            SplitKind::Cold => cold_split(self.num_classes, self.num_tasks),
            SplitKind::Warm if self.num_tasks >= 2 => warm_split(self.num_classes, self.num_tasks - 1),
            SplitKind::Warm => Err(Error::Invalid("warm split needs at least two tasks".into())),
        };
        split.map_err(|e| Error::Config(e.to_string()))
    }

    pub fn scenario_seed_for(&self, run_seed: u64) -> u64 {
        self.scenario_seed.unwrap_or(run_seed)
    }

    pub fn drift_spec(&self) -> DriftSpec {
        DriftSpec {
            kind: self.drift_kind,
            magnitude: self.drift_magnitude,
            scale: self.drift_scale,
            warp: self.drift_warp,
            observation_noise: self.observation_noise,
            condition_bound: self.condition_bound,
        }
    }

    pub fn synthetic_spec(&self, run_seed: u64) -> Result<SyntheticScenario> {
        Ok(SyntheticScenario {
            num_tasks: self.num_tasks,
            num_classes: self.num_classes,
            classes_per_task: self.classes_per_task()?,
            split: self.split,
            dim: self.dim,
            cluster_separation: self.cluster_separation,
            cluster_std: self.cluster_std,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            drift_schedule: vec![self.drift_spec()],
            test_balance: match self.test_subset_fraction {
                Some(fraction) => TestBalance::Subset { fraction },
                None => TestBalance::Balanced,
            },
            seed: self.scenario_seed_for(run_seed),
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
        }
    }

    pub fn toy_spec(&self, run_seed: u64) -> Result<ToyScenarioSpec> {
        let seed = self.scenario_seed_for(run_seed);
        Ok(ToyScenarioSpec {
            classes_per_task: self.classes_per_task()?,
            split: self.split,
            in_dim: self.in_dim,
            hidden_dim: self.hidden_dim,
            feature_dim: self.dim,
            input_separation: self.input_separation,
            input_std: self.input_std,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            weights: self.loss_weights(),
            train: TrainConfig {
                epochs: self.epochs,
                base_lr: self.base_lr,
                batch_size: self.batch_size,
                seed,
                options: LossOptions {
                    kd_renormalize: self.kd_renormalize,
                    scl_normalize: self.scl_normalize,
                    scl_denominator: self.scl_denominator,
                },
            },
            seed,
        })
    }

    pub fn analytic_options(&self) -> AnalyticOptions {
        AnalyticOptions {
            ridge: self.ridge,
            min_ridge: self.min_ridge,
            condition_threshold: self.condition_threshold,
            singular_policy: self.singular_policy,
            affine: self.affine_projector,
        }
    }

    pub fn gd_options(&self) -> GdOptions {
        GdOptions {
            learning_rate: self.gd_learning_rate,
            optimizer: self.gd_optimizer.optimizer(),
            affine: self.affine_projector,
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring seeds and the output location.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.seeds.clear();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

const OPTIONAL_KEYS: &[&str] = &["test_subset_fraction", "scenario_seed", "max_test_per_class"];
