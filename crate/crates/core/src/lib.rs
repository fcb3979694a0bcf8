pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use params::{Bound, Parameters};
pub use tensor::{Graph, Mask, Padding, Tensor, Var};
