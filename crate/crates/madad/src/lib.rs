//! IO, file formats, configuration and pipeline orchestration around
//! [`madad_core`]: corpus layout on disk, the checkpoint container, PGM/PNG
//! and raw-f64 exports, evaluation reports, and the command implementations
//! behind the `madad` binary.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod pgm;
pub mod pipeline;
pub mod report;

pub use error::{CliError, CliResult};
