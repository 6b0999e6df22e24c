pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fuser;
pub mod grid;
pub mod memory;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
pub use grid::ImageGrid;
