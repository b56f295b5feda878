//! Files, run directories and the `kdsgl` command line on top of
//! [`kdsgl_core`].

pub mod bundle;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod parallel;
pub mod params;
pub mod report;
pub mod workflow;

pub use error::{Error, Result};
pub use kdsgl_core;
