//! Desk-scale training, evaluation, checkpoints and ablation sweeps.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod train;

pub use data::{make_task, Dataset, TaskId};
pub use train::{evaluate, train, RunRecord, TrainConfig};
