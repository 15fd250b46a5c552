//! Training, evaluation and file formats for chunkdiff.
//!
//! The numerical core lives in `chunkdiff_core`; this crate adds everything that
//! touches the file system: run files, checkpoints, episode files, run
//! directories, and the command-line harness.

pub mod ablation;
pub mod bench;
pub mod binio;
pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod export;
pub mod formats;
pub mod models;
pub mod pipeline;
pub mod rundir;
pub mod runfile;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
