//! Learned initializers: a small MLP mapping case features to a starting
//! state, trained on Newton-Raphson labels, on the power-flow residual, or on
//! a mix of both.

pub mod data;
pub mod eval;
pub mod features;
pub mod loss;
pub mod mlp;
pub mod model;
pub mod train;

pub use data::{generate_dataset, Dataset, DatasetConfig, ParamRanges, Record, Split};
pub use eval::{evaluate, evaluate_starts, evaluate_zero, metrics_table, EvalMetrics};
pub use loss::{mse_loss, physics_loss};
pub use model::{InitModel, Scheme};
pub use train::{train, TrainConfig, TrainLog};
