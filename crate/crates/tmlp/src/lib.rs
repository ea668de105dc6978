//! File formats, corpus ingestion, run configuration, experiment
//! orchestration and reports on top of `tmlp-core`.

pub mod config;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod firing_io;
pub mod probes;
pub mod prompts;
pub mod report;
pub mod vocab;
pub mod weights;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use report::ExperimentReport;
pub use tmlp_core as core;
