//! File formats, the Monte-Carlo harness and the pipelines behind the
//! `lowalt` command line.

pub mod binary;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod pipeline;
pub mod schema;

pub use error::CliError;
pub use harness::{run_monte_carlo, Manifest, Plan, RunOptions};
pub use pipeline::{Geometry, Method};
pub use schema::{ExperimentKind, ExperimentSpec};
