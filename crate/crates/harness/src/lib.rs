//! Experiment harness: run configuration, the staged pipeline with
//! checkpoints and resume, β sweeps, plots, and the HTTP label service.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod labels;
pub mod pipeline;
pub mod plots;
pub mod sweep;

pub use config::{LabelSourceKind, RunConfig};
pub use error::{HarnessError, Result};
pub use pipeline::{resume, run_pipeline, run_through, RunOutcome};
pub use sweep::{beta_sweep, SweepReport};

/// Environment variable naming the default runs root.
pub const RUNS_ROOT_ENV: &str = "CDP_RUNS_ROOT";
