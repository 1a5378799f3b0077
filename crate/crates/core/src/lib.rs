//! Federated learning with per-client adaptive differential-privacy budgets.
//!
//! Clients train a softmax-regression model locally, clip and scale their
//! update, add Laplace noise calibrated to a per-round budget ε′, and the
//! server averages the noised updates weighted by data size. The budget ε′
//! shrinks when a client's update agrees with the global model and training
//! is already progressing well.

pub mod adjust;
pub mod data;
pub mod dp;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod model;
pub mod params;
pub mod rng;

pub use adjust::{adjust, AdjustedBudget, AdjustmentInput, BudgetJudgment, ScoreBreakdown};
pub use data::{Dataset, Partition, PartitionMode, Split};
pub use dp::{BudgetParams, LedgerEntry, PrivacyLedger};
pub use engine::{
    run_training, ClientUpload, EngineConfig, GlobalState, MethodStrategy, RoundRecord, Simulation,
    TrainingOutcome, UploadHooks,
};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, MnistData, Overrides, SummaryRow};
pub use model::{EvalResult, LabeledExample, ModelShape, SgdConfig};
pub use params::{cosine_similarity, ParamVector};
