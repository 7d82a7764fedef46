//! Output artifacts: the metrics summary, the run manifest and the JSON/CSV
//! writers. Everything is struct-serialized (no maps) so reruns with the same
//! config and seed produce byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Mean/std of the absolute lateral prediction error at one horizon step,
/// pooled over all start points and evaluation tracks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredStep {
    pub step: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl PredStep {
    pub fn from_errors(step: usize, errors: &[f64]) -> Self {
        let n = errors.len();
        if n == 0 {
            return Self { step, mean: 0.0, std: 0.0, count: 0 };
        }
        let mean = errors.iter().sum::<f64>() / n as f64;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
        Self { step, mean, std: var.sqrt(), count: n }
    }
}

/// Race-outcome counters for the head-to-head evaluation batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaceStats {
    pub races: usize,
    pub overtaken: usize,
    pub hard_collisions: usize,
    pub border_hits: usize,
}

/// Comparator arm of a head-to-head run (the GP trained on the larger passive
/// batch), evaluated on the same tracks and logged trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub overtake_time_mean: Option<f64>,
    pub overtake_time_std: Option<f64>,
    pub gp_rmse: Vec<f64>,
    pub pred_err_by_step: Vec<PredStep>,
    pub stats: RaceStats,
}

/// Top-level summary written to `summary.json`. Fields that do not apply to a
/// mode are null or empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub lap_times_planned: Vec<f64>,
    pub lap_times_measured: Vec<f64>,
    /// Held-out one-step residual RMSE per GP output.
    pub gp_rmse: Vec<f64>,
    pub overtake_time_mean: Option<f64>,
    pub overtake_time_std: Option<f64>,
    /// Multi-step lateral prediction-error curve of the primary GP.
    pub pred_err_by_step: Vec<PredStep>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stats: Option<RaceStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<BaselineReport>,
}

impl MetricsReport {
    pub fn empty() -> Self {
        Self {
            lap_times_planned: Vec::new(),
            lap_times_measured: Vec::new(),
            gp_rmse: Vec::new(),
            overtake_time_mean: None,
            overtake_time_std: None,
            pred_err_by_step: Vec::new(),
            stats: None,
            baseline: None,
        }
    }
}

/// Provenance of a run: hash of the exact config bytes, the seed, and the
/// binary version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_manifest(out: &Path, config_bytes: &[u8], seed: u64) -> Result<(), CliError> {
    let manifest = Manifest {
        config_sha256: sha256_hex(config_bytes),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}
