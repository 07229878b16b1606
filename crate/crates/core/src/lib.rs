pub mod bias;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod prompt;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
