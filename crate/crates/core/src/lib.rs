//! Sequential sentence matching for multi-turn response selection.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod integration;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, S2mModel};
pub use tensor::{PrecisionMode, Scalar, Tensor};
