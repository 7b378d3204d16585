pub mod array_sim;
pub mod beamformer;
pub mod config;
pub mod crf;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph_ops;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
