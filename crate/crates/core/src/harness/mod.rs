//! Datasets, quality metrics, run configuration, checkpoints, image
//! ingestion, and the run/replay/ablation drivers behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod ingest;
pub mod metrics;
pub mod run;
