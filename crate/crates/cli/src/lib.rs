//! Training, evaluation and ablation harness around `moaecr-core`.

pub mod config;
pub mod error;
pub mod train;

pub use config::{Overrides, Preset, Protocol, RunConfig};
pub use error::{CliError, CliResult};
pub use train::{train, Benchmark, Model, RunRecord, TrainedRun};
pub mod gradsuite;
pub mod embed;
pub mod ablate;
pub mod io;
