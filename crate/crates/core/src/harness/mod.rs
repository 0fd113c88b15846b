//! Experiment orchestration: configuration, file formats, dataset
//! generation and the command pipeline behind the CLI.

pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod pipeline;
pub mod preview;
pub mod rsf;

pub use config::ExperimentConfig;
pub use rsf::{read_image, read_rsf, read_sinogram, write_image, write_rsf, write_sinogram, RsfArray, RsfKind};
