//! File formats, stage drivers and CLI plumbing around `affordsplat-core`.

pub mod checkpoint;
pub mod compact;
pub mod config;
pub mod error;
pub mod harness;
pub mod ply;
pub mod report;
pub mod scores;

pub use error::{Error, ExitClass, Result};
