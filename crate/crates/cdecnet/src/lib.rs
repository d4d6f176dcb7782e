//! Files, training harness and command verbs around `cdecnet-core`.

pub mod coco;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod pgm;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
