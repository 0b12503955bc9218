//! Test-time drift compensation for prototype-based class-incremental learning.
//!
//! Old-class prototypes go stale when the encoder is retrained on new classes. This crate
//! fits a linear map from the previous encoder's feature space to the current one on a
//! bounded queue of paired test features, moves the stale prototypes through it and
//! classifies by nearest class mean.

pub mod error;
pub mod harness;
pub mod projector;
pub mod prototypes;
pub mod queue;
pub mod scenario;
pub mod sim;
pub mod trainer;

pub use error::{DumpError, Error, ErrorCategory, Result};
pub use projector::{
    evolve_prototypes, solve_analytic, solve_analytic_with, solve_gradient_descent, AnalyticOptions, Projector,
    SingularPolicy, SolveReport,
};
pub use prototypes::{compute_prototypes, ncm_predict, ClassId, FeatureRecord, PrototypeTable, TaskDataset, TaskId};
pub use queue::{init_with_pseudo_features, FeatureQueue, QueuePair};
pub use scenario::{SplitKind, StageFeatures, StagedScenario};
