pub mod autograd;
pub mod backend;
pub mod color;
pub mod data;
pub mod error;
pub mod image;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod params;
pub mod physics;
pub mod tensor;
pub mod train;

pub use crate::backend::{Backend, Eager};
pub use crate::error::{Error, Result};
pub use crate::image::{ClampReport, ImageRgb};
pub use crate::params::ParamStore;
pub use crate::tensor::{DType, Real, Tensor};
pub use crate::losses::{LossParts, LossWeights, Objective};
pub use crate::metrics::{MetricReport, MetricRow};
pub use crate::net::{ModelConfig, WaterFormer};
pub use crate::train::{TrainConfig, TrainState, Variant};
