//! File formats, experiment harness and command-line front end for the
//! one-shot generator adaptation pipeline in [`oneshot_core`].

pub mod checkpoint;
pub mod config;
mod error;
pub mod imageio;
pub mod ingest;
pub mod experiments;
pub mod manifest;
pub mod pipeline;
pub mod rundir;

pub use error::{Error, Result};
