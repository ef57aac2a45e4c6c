//! Conditional lane detection.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rim;
pub mod viz;

pub use error::{Error, Result};
