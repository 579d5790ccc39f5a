pub mod degrade;
pub mod dsp;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod nn;
pub mod separation;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
