//! File formats, dataset ingestion, training orchestration and reporting on
//! top of `nightatlas-core`.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod dataset;
pub mod harness;
pub mod pngio;
pub mod report;
pub mod synth;

pub use nightatlas_core as core;
