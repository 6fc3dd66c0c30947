pub mod alignment;
pub mod attention;
pub mod baselines;
pub mod checkpoint;
pub mod editing;
pub mod encoder;
pub mod error;
pub mod evalsuite;
pub mod generator;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod training;

pub use error::{Error, Result};
