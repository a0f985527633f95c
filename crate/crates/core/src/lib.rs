pub mod block;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod manifest;
pub mod numerics;
pub mod pipeline;
pub mod ssm;
pub mod train;
pub mod vast;

pub use error::{Error, Result};
