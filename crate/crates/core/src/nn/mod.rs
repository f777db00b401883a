//! The temporal convolutional attention network.

pub mod attention;
pub mod config;
pub mod model;
pub mod params;

pub use attention::AttentionRecord;
pub use config::{Activation, MaskMode, SoftmaxDirection, TcanConfig};
pub use model::{loss_and_grads, model_forward, sequence_loss, tcan_block, ForwardMode, ForwardOutput};
pub use params::{count_parameters, ModelParams};
