//! Experiment configuration: JSON-backed, with defaults for every knob so a
//! minimal config file only names the track and the protocol sizes.

use racer_core::gp::OptimizeSettings;
use racer_core::headtohead::RaceConfig;
use racer_core::timetrial::TimeTrialConfig;
use racer_core::track::{random_track, RandomTrackSpec, TrackError};
use racer_core::{Track, VehicleParams};
use serde::{Deserialize, Serialize};

/// Track source for the time-trial mode: a fixed segment list or a seeded
/// random circuit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrackSpec {
    Fixed { track: Track },
    Random { spec: RandomTrackSpec },
}

impl TrackSpec {
    pub fn build(&self, seed: u64) -> Result<Track, TrackError> {
        match self {
            TrackSpec::Fixed { track } => Ok(track.clone()),
            TrackSpec::Random { spec } => random_track(seed, spec),
        }
    }
}

fn default_tt_iterations() -> usize {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeTrialSection {
    /// Full stack configuration; the exploration alpha schedule lives in
    /// `config.exploration.alpha_schedule`.
    #[serde(default)]
    pub config: TimeTrialConfig,
    #[serde(default = "default_tt_iterations")]
    pub iterations: usize,
}

impl Default for TimeTrialSection {
    fn default() -> Self {
        Self { config: TimeTrialConfig::default(), iterations: default_tt_iterations() }
    }
}

fn default_passive_initial() -> usize {
    20
}
fn default_passive_baseline() -> usize {
    100
}
fn default_explore_alpha() -> f64 {
    0.9
}
fn default_explore_duration() -> f64 {
    600.0
}
fn default_eval_tracks() -> usize {
    20
}
fn default_capacity() -> usize {
    300
}
fn default_noise() -> [f64; 4] {
    [1e-4; 4]
}
fn default_stride() -> usize {
    2
}
fn default_start_gap() -> f64 {
    12.0
}
fn default_start_speed() -> f64 {
    5.0
}
fn default_min_fit() -> usize {
    5
}
fn default_pred_steps() -> usize {
    9
}

/// Random-track family used for the head-to-head training and evaluation
/// batches: wide enough for two cars side by side.
pub fn default_h2h_tracks() -> RandomTrackSpec {
    RandomTrackSpec {
        n_segments: 6,
        length_min: 30.0,
        length_max: 60.0,
        curvature_min: 0.0,
        curvature_max: 0.05,
        w_l: 4.0,
        w_r: -4.0,
        closed: true,
        max_retries: 50,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct H2hSection {
    /// Per-race simulation configuration (controllers, opponent, exploration).
    #[serde(default)]
    pub race: RaceConfig,
    /// Random-track family for the seeded race batches.
    #[serde(default = "default_h2h_tracks")]
    pub tracks: RandomTrackSpec,
    /// Passive races feeding the initial (pre-exploration) opponent GP.
    #[serde(default = "default_passive_initial")]
    pub passive_initial: usize,
    /// Passive races feeding the baseline comparator GP.
    #[serde(default = "default_passive_baseline")]
    pub passive_baseline: usize,
    #[serde(default = "default_explore_alpha")]
    pub explore_alpha: f64,
    /// Exploration-session length in simulated seconds.
    #[serde(default = "default_explore_duration")]
    pub explore_duration: f64,
    /// Evaluation batch size (random tracks, alpha = 0).
    #[serde(default = "default_eval_tracks")]
    pub eval_tracks: usize,
    /// Opponent-GP dataset capacity.
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Observation-noise variances for the four opponent-increment outputs.
    #[serde(default = "default_noise")]
    pub noise: [f64; 4],
    /// Evidence-maximized hyperparameters when set; fixed kernel otherwise.
    #[serde(default)]
    pub hyperopt: Option<OptimizeSettings>,
    /// Keep every n-th logged sample when absorbing race data.
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    /// Plain pushes before the selection policy takes over.
    #[serde(default = "default_min_fit")]
    pub min_fit: usize,
    /// Initial longitudinal gap to the opponent (m).
    #[serde(default = "default_start_gap")]
    pub start_gap: f64,
    /// Initial speed of both cars (m/s).
    #[serde(default = "default_start_speed")]
    pub start_speed: f64,
    /// Horizon steps evaluated in the offline prediction-error analysis.
    #[serde(default = "default_pred_steps")]
    pub pred_steps: usize,
}

impl Default for H2hSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "VehicleParams::default")]
    pub vehicle: VehicleParams,
    /// Track for the time-trial mode.
    pub track: TrackSpec,
    #[serde(default)]
    pub timetrial: TimeTrialSection,
    #[serde(default)]
    pub h2h: H2hSection,
}
