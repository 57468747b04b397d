//! Optimisation, evaluation metrics, and the ablation harness.

pub mod ablation;
pub mod metrics;
pub mod report;
pub mod schedule;
pub mod trainer;

pub use ablation::{run_ablation, AblationConfig, AblationTable, RunResult};
pub use metrics::{accuracy_at_k, average_precision, map_at_t, ApResult};
pub use report::{evaluate, report_from_predictions, EvalReport};
pub use schedule::{sgd_step, Schedule};
pub use trainer::{DataSource, StepLog, TrainConfig, Trainer};
