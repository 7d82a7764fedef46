//! Experiment front end for the racing stacks: JSON experiment configs,
//! seeded batch drivers for the time-trial and head-to-head protocols, and
//! deterministic summary/manifest/CSV artifacts.

pub mod config;
pub mod report;
pub mod run;

use racer_core::gp::GpError;
use racer_core::track::TrackError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv {0}: {1}")]
    Csv(String, String),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Gp(#[from] GpError),
}
