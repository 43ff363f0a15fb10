//! File formats, checkpoints and command implementations around
//! [`hdnet_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datadir;
pub mod error;
pub mod formats;
pub mod imageio;
pub mod manifest;

pub use error::{Error, Result};
