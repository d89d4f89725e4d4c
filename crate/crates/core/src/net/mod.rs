//! The enhancement network.
//!
//! Three encoder stages of window-attention blocks (optionally closed by a
//! color restoration block) feed two decoder stages through skip fusions. A
//! zero-initialized 3x3 head predicts the reconstruction variables, so a fresh
//! network is exactly the identity map.

pub mod config;
pub mod layers;
pub mod model;

pub use config::{Activation, CrbSite, FusionKind, ModelConfig, ReconKind, ValueConv};
pub use layers::{Init, Layer, ParamSpec};
pub use model::{count_store_params, WaterFormer, SIZE_MULTIPLE};
