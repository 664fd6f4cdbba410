pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod encoders;
pub mod heatmap;
pub mod fusion;
pub mod loss;
pub mod dataset;
pub mod trainer;
