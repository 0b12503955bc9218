//! Small dense extractor trained task by task with cross-entropy, distillation and
//! supervised contrastive terms. Its successive snapshots give genuinely drifted feature
//! spaces for end-to-end runs.

pub mod losses;
pub mod model;
pub mod scenario;
pub mod train;

pub use losses::{
    base_loss, ce_loss, kd_loss, scl_from_embeddings, scl_loss, EmbeddingLoss, LabeledBatch, LossOptions, LossOutput,
    LossWeights, SclDenominator,
};
pub use model::{Forward, ModelGrads, ToyModel, MODEL_FORMAT};
pub use scenario::{train_toy_scenario, ToyScenario, ToyScenarioSpec};
pub use train::{adaptive_learning_rate, head_accuracy, train_task, TrainConfig};
