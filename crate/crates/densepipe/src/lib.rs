//! File formats, reporting, and the command-line front end for the
//! densepipe training pipeline. All the math lives in `densepipe-core`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod imageio;
pub mod report;

pub use cli::dispatch;
