//! Active exploration over the GP feature space: build a candidate grid from
//! quantiles of past features, precompute weighted posterior variances, and
//! pick a target feature vector by ranking candidates on (standardized)
//! distance to the currently planned features against posterior variance.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::GpModel;

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("feature history is empty")]
    EmptyHistory,
    #[error("mask selects {mask} entries but the target has {target}")]
    MaskMismatch { mask: usize, target: usize },
}

/// Candidate feature vectors plus the scales used to standardize distances
/// and, once precomputed, the weighted posterior variance of each candidate.
#[derive(Debug, Clone)]
pub struct CandidateGrid {
    pub candidates: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplorationConfig {
    /// Trade-off weight per iteration: 1 = pure variance seeking, 0 = pure
    /// proximity to the planned features. Iterations beyond the schedule use
    /// the last entry.
    pub alpha_schedule: Vec<f64>,
    /// Diagonal output weights applied when summing posterior variances.
    pub output_weights: Vec<f64>,
    /// Empirical quantiles of the feature history used as grid values.
    pub quantiles: Vec<f64>,
    /// Maximum grid size; larger Cartesian products are subsampled by seed.
    pub grid_cap: usize,
    /// Stalemate detector: relative-configuration change threshold (m).
    pub stalemate_threshold: f64,
    /// Consecutive steps below the threshold before declaring a stalemate.
    pub stalemate_window: usize,
    /// Steps the exploration target stays frozen after a stalemate.
    pub freeze_duration: usize,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            alpha_schedule: vec![6.0 / 7.0, 5.0 / 7.0, 0.0],
            output_weights: vec![1.0],
            quantiles: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            grid_cap: 3125,
            stalemate_threshold: 0.05,
            stalemate_window: 10,
            freeze_duration: 20,
        }
    }
}

impl ExplorationConfig {
    pub fn alpha_for_iteration(&self, iteration: usize) -> f64 {
        if self.alpha_schedule.is_empty() {
            return 0.0;
        }
        let idx = iteration.min(self.alpha_schedule.len() - 1);
        self.alpha_schedule[idx]
    }
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Build the candidate grid from a history of feature vectors: per dimension
/// take the configured quantiles as typical values, form the Cartesian
/// product, and subsample deterministically when it exceeds the cap.
/// Standardization scales are the per-dimension standard deviations of the
/// history, floored at 1e-6.
pub fn build_grid(
    history: &[Vec<f64>],
    config: &ExplorationConfig,
    seed: u64,
) -> Result<CandidateGrid, ExploreError> {
    if history.is_empty() {
        return Err(ExploreError::EmptyHistory);
    }
    let n_z = history[0].len();
    let n_h = history.len();

    let mut values: Vec<Vec<f64>> = Vec::with_capacity(n_z);
    let mut scales = Vec::with_capacity(n_z);
    for d in 0..n_z {
        let mut col: Vec<f64> = history.iter().map(|h| h[d]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut vals: Vec<f64> = config.quantiles.iter().map(|&q| quantile(&col, q)).collect();
        vals.dedup();
        values.push(vals);

        let mean = col.iter().sum::<f64>() / n_h as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_h as f64;
        scales.push(var.sqrt().max(1e-6));
    }

    let total: usize = values.iter().map(|v| v.len()).product();
    let mut candidates = Vec::with_capacity(total.min(config.grid_cap));
    let keep: Option<Vec<usize>> = if total > config.grid_cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, total, config.grid_cap).into_vec();
        idx.sort_unstable();
        Some(idx)
    } else {
        None
    };

    let mut keep_iter = keep.as_deref().map(|k| k.iter().peekable());
    for flat in 0..total {
        if let Some(it) = keep_iter.as_mut() {
            match it.peek() {
                Some(&&next) if next == flat => {
                    it.next();
                }
                _ => continue,
            }
        }
        let mut z = Vec::with_capacity(n_z);
        let mut rem = flat;
        // Last dimension varies fastest.
        for vals in values.iter().rev() {
            z.push(vals[rem % vals.len()]);
            rem /= vals.len();
        }
        z.reverse();
        candidates.push(z);
    }

    Ok(CandidateGrid { candidates, scales, variances: Vec::new() })
}

/// Fill in v_i = sum_d S_dd * sigma_d^2(z_i) for every candidate.
pub fn precompute_variances(model: &GpModel, grid: &mut CandidateGrid, output_weights: &[f64]) {
    grid.variances = grid
        .candidates
        .iter()
        .map(|z| {
            let (_, var) = model.predict(z);
            var.iter().zip(output_weights).map(|(v, w)| w * v).sum()
        })
        .collect();
}

/// Pick the target feature vector for the current step.
///
/// Candidates are ranked twice: by standardized distance to the planned
/// features `z_plan` (nearest candidate gets the largest rank D_i) and by
/// precomputed weighted variance (largest variance gets the largest rank
/// V_i). The winner maximizes alpha*V_i + (1-alpha)*D_i; ties go to the
/// smaller distance, then the smaller index. With `reversed` the distance
/// ranking is flipped so distant candidates are rewarded instead (used to
/// break stalemates).
pub fn select_target(
    z_plan: &[f64],
    grid: &CandidateGrid,
    alpha: f64,
    reversed: bool,
) -> (Vec<f64>, usize) {
    let n = grid.candidates.len();
    assert!(n > 0, "empty candidate grid");
    assert_eq!(grid.variances.len(), n, "variances not precomputed");

    let dist: Vec<f64> = grid
        .candidates
        .iter()
        .map(|z| {
            z.iter()
                .zip(z_plan)
                .zip(&grid.scales)
                .map(|((a, b), s)| ((a - b) / s).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    // Ranks are positions in a stable sort, so equal keys get distinct ranks
    // by original index; both rank vectors are permutations of 1..=n.
    let rank_from = |keys: &[f64], largest_key_gets_largest_rank: bool| -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap().then(a.cmp(&b)));
        let mut rank = vec![0usize; n];
        for (pos, &i) in order.iter().enumerate() {
            rank[i] = if largest_key_gets_largest_rank { pos + 1 } else { n - pos };
        }
        rank
    };

    // Nearest candidate gets the largest D (unless reversed).
    let d_rank = rank_from(&dist, reversed);
    let v_rank = rank_from(&grid.variances, true);

    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..n {
        let score = alpha * v_rank[i] as f64 + (1.0 - alpha) * d_rank[i] as f64;
        let better = score > best_score
            || (score == best_score
                && (dist[i] < dist[best] || (dist[i] == dist[best] && i < best)));
        if better {
            best = i;
            best_score = score;
        }
    }
    (grid.candidates[best].clone(), best)
}

/// Overwrite the masked entries of a reference vector with the target
/// features; `mask[j]` gives the index into `reference` that feature j maps
/// to. Entries outside the mask are untouched.
pub fn update_reference(
    reference: &mut [f64],
    z_ref: &[f64],
    mask: &[usize],
) -> Result<(), ExploreError> {
    if mask.len() > z_ref.len() {
        return Err(ExploreError::MaskMismatch { mask: mask.len(), target: z_ref.len() });
    }
    for (j, &slot) in mask.iter().enumerate() {
        if slot >= reference.len() {
            return Err(ExploreError::MaskMismatch { mask: slot, target: reference.len() });
        }
        reference[slot] = z_ref[j];
    }
    Ok(())
}

/// True when the relative configuration (Δs, Δe_y) has changed by less than
/// the threshold between consecutive steps for the whole trailing window.
pub fn detect_stalemate(history: &[(f64, f64)], config: &ExplorationConfig) -> bool {
    let w = config.stalemate_window;
    if history.len() < w + 1 {
        return false;
    }
    history[history.len() - w - 1..]
        .windows(2)
        .all(|p| {
            let dds = p[1].0 - p[0].0;
            let ddy = p[1].1 - p[0].1;
            (dds * dds + ddy * ddy).sqrt() < config.stalemate_threshold
        })
}

/// Bookkeeping for the stalemate heuristic: once detected, the exploration
/// target is frozen (and distance ranks reversed) for a fixed number of steps.
#[derive(Debug, Clone, Default)]
pub struct StalemateTracker {
    history: Vec<(f64, f64)>,
    freeze_left: usize,
}

impl StalemateTracker {
    /// Record the current relative configuration; returns true while the
    /// reversed/frozen regime is active.
    pub fn step(&mut self, ds: f64, dey: f64, config: &ExplorationConfig) -> bool {
        self.history.push((ds, dey));
        if self.history.len() > config.stalemate_window + 1 {
            let drop = self.history.len() - (config.stalemate_window + 1);
            self.history.drain(..drop);
        }
        if self.freeze_left > 0 {
            self.freeze_left -= 1;
            return true;
        }
        if detect_stalemate(&self.history, config) {
            self.freeze_left = config.freeze_duration;
            self.history.clear();
            return true;
        }
        false
    }
}
