//! Multi-scale wavelet transformer (MSWT) operator learning on periodic
//! 2D grids.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rollout;
pub mod spectral;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use autodiff::{Gradients, Graph, Var};
pub use config::RunConfig;
pub use error::{Error, FormatError, Result};
pub use gradcheck::{GradCheck, ParamMap};
pub use model::{ModelConfig, ModelParameters, Mswt};
pub use rollout::{StepOperator, Trajectory};
pub use tensor::{Padding, Tensor};
pub use training::{PairDataset, TrainConfig, Trainer};
