//! Discriminative relational recurrent forecasting of per-actor action labels.

pub mod boxes;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod relational;
pub mod synthworld;
pub mod tape;
pub mod tensor;
pub mod traineval;

pub use boxes::BBox;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Checkpoint, LossMode, Model, ModelConfig, Prediction, Variant};
pub use params::{ParamId, ParamStore};
pub use relational::{AttentionRecord, RelationKind};
pub use synthworld::{Episode, World, WorldConfig, WorldMode};
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;
pub use traineval::{EvalReport, Schedule, TrainConfig};
