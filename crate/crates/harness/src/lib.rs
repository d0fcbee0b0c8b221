//! Datasets, reports, reproductions, diagnostics and the command-line
//! interface built on `betaat`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod gradcheck;
pub mod idx;
pub mod report;
pub mod repro;
