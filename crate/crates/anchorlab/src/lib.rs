//! File formats, dataset loaders, run configuration and the commands behind
//! the `anchorlab` binary. The numerical work lives in `anchorlab_core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod loaders;
pub mod parallel;

pub use error::{CliError, Result};
