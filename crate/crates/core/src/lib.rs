pub mod disentangle;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod imageio;
pub mod nn;
pub mod perception;
pub mod scalar;
pub mod toyfaces;
pub mod training;

pub use error::{Error, Result};
