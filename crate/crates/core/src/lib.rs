//! Multi-group vector-quantized image tokenizer.
pub mod codec;
pub mod error;
pub mod experiments;
pub mod imaging;
pub mod mgq;
pub mod model;
pub mod ndgrad;
pub mod objectives;
pub mod pipeline;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
