//! File formats, configuration, the training driver and the command-line
//! interface for the layered self-supervised distillation trainer.

mod bytes;
pub mod checkpoint;
pub mod cifar;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod idx;
pub mod metrics;
pub mod run;
pub mod store_file;
pub mod synth;

pub use error::{CliError, CliResult};
