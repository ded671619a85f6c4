pub mod config;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
