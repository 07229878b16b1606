//! Single-stream multimodal encoder with an autoregressive decoder, plus the
//! checkpoint container.

mod checkpoint;
mod config;
mod params;
mod transformer;

pub use checkpoint::{Checkpoint, Dtype, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, OPTIMIZER_PREFIX};
pub use config::ModelConfig;
pub use params::{check_params, init_params, param_shapes, Params};
pub use transformer::{Bound, Encoded, EncoderOutput, Model};
