//! Dataset files, checkpoints, reports, Kaplan–Meier plots and the
//! `survfuse` command-line harness around [`survfuse_core`].

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod km;
pub mod report;
pub mod run;

pub use error::{Error, Result};
