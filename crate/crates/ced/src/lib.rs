//! Run directories, file formats, parallel stages, the scorer protocol and
//! the command-line pipeline around `ced-core`.

pub mod config;
mod error;
pub mod ingest;
pub mod parallel;
pub mod pipeline;
pub mod report;
pub mod scorer;
pub mod store;
pub mod synth;

pub use ced_core;
pub use config::{Lineage, PipelineConfig, ScorerConfig, Seeds};
pub use error::{Error, ErrorKind, Result};
pub use pipeline::{Pipeline, SelectionRecord, Stage, StageOutcome};
