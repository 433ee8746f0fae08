//! Residual-network training with ordered sub-network KL supervision.
//!
//! The crate contains a small reverse-mode autodiff engine, a residual MLP
//! family whose ordered sub-networks share weights with the main network,
//! training loops (common, stimulative, individual, stochastic depth),
//! sub-network evaluation with batch-norm re-calibration, and test-time
//! destruction experiments (layer deletion and within-stage permutation).

// Range checks are written as `!(x >= lo)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod destruction;
pub mod error;
pub mod evaluation;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod training;

pub use data::{Dataset, Split, SplitData};
pub use destruction::DestructionPlan;
pub use error::{Error, Result};
pub use evaluation::EvalOptions;
pub use network::{NetworkSpec, ResidualNet, Route, SubnetMask};
pub use tensor::Tensor;
pub use training::TrainConfig;
