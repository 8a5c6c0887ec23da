//! Data loading, training, heatmap export and the `mobivit` command line,
//! on top of the numerics in `mobivit-core`.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod pgm;
pub mod run;
pub mod train;

pub use error::{CliError, ExitStatus};
