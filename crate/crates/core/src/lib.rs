pub mod config;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod hetgnn;
pub mod hetgraph;
pub mod pretrain;
pub mod trainer;

pub use error::{Error, Result};
