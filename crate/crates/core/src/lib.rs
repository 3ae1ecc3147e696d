//! Step-by-step networks: channel-split, narrow-to-wide stacks of residual
//! sub-networks, with a small tape autodiff, an analytical cost model,
//! shortcut diagnostics and a CPU training harness.

pub mod blocks;
pub mod config;
pub mod costing;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod network;
pub mod params;
pub mod presets;
pub mod probe;
pub mod scalar;
pub mod steps;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{ElementWidth, Scalar};
pub use tensor::{AttentionMask, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ResidualStack32 = blocks::ResidualStack<f32>;
pub type ResidualStack64 = blocks::ResidualStack<f64>;
pub type StepsModel32 = steps::StepsModel<f32>;
pub type StepsModel64 = steps::StepsModel<f64>;
pub type MirroredStepsModel32 = steps::MirroredStepsModel<f32>;
pub type MirroredStepsModel64 = steps::MirroredStepsModel<f64>;
pub type Network32 = network::Network<f32>;
pub type Network64 = network::Network<f64>;
