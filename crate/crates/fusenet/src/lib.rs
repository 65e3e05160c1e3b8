//! File formats, cohort IO, run configuration and the `fusenet` command
//! line on top of [`fusenet_core`].

pub mod cli;
pub mod cohort;
pub mod config;
pub mod crossval;
mod error;
pub mod keyvalue;
pub mod mmimg;
pub mod model;
pub mod pgm;

pub use error::{Error, Result};
