//! Volumetric multi-class segmentation with a convolutional encoder/decoder
//! and a context-aware shifted-window attention bottleneck.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod params;
pub mod train;

pub use cisunet_tensor as tensor;
pub use config::{
    load_config, preset, AttentionVariant, ConfigError, DataConfig, ModelConfig, RunConfig,
    TrainConfig,
};
pub use error::{Error, Result};
pub use params::{count_parameters, parameter_breakdown, NetworkParameters};
