//! File formats, run configuration, reports and the command-line interface
//! on top of `celldiff-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;
