//! Command-line pipelines over the `circuitscope` library: metric runs,
//! direct logit attribution, patching sweeps and dataset generation, with
//! JSON/CSV results and SVG figures.

pub mod commands;
pub mod error;
pub mod inputs;
pub mod output;
pub mod reports;
pub mod svg;

pub use commands::{cmd_dataset, cmd_dla, cmd_patch, cmd_run};
pub use error::{CliError, CliResult};
pub use inputs::{PromptSource, RunConfig, MODEL_DIR_ENV};
