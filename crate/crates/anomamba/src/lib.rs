//! Training, evaluation and inference pipeline around `anomamba-core`:
//! image codecs, dataset indexing, configuration, weight archives, and
//! the command implementations behind the CLI.

pub mod archive;
pub mod bench;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imagefmt;
pub mod report;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
