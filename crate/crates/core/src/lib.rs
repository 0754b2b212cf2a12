//! Few-shot segmentation by class representation.
//!
//! A support image and mask give a weight vector over known-class activation
//! channels; the weighted sum of the query's activation maps is a foreground
//! prior that gates the query features before decoding.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
