//! Batch front end for `nvdress-core`: TOML experiment configs in, CSV, JSON
//! and SVG out.
//!
//! Every CSV starts with `#` comment lines carrying the config hash and seed,
//! followed by a `name:unit` header. Identical configs and seeds produce
//! byte-identical CSV files.

pub mod config;
pub mod error;
pub mod output;
pub mod plot;
pub mod run;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{CliError, Result};
pub use run::{plot_file, resolve_out_dir, run, Overrides, OUT_DIR_ENV};
