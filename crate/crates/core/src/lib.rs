pub mod cli;
pub mod config;
pub mod datapipe;
mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
