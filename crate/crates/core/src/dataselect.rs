//! Diverse data selection: keep a bounded dataset maximally informative by
//! adding candidates whose posterior variance beats the median leave-one-out
//! variance, replacing the least informative point once the capacity is
//! reached, and rejecting measurement outliers up front.

use serde::{Deserialize, Serialize};

use crate::gp::{GpDataset, GpModel, Observation};

/// Parameters of the selection policy: dataset capacity and the outlier
/// rejection multiplier applied to the sum of posterior and noise std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub capacity: usize,
    pub outlier_multiplier: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self { capacity: 300, outlier_multiplier: 3.0 }
    }
}

/// What happened to a candidate observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionOutcome {
    /// Appended; dataset was below capacity.
    Added,
    /// Swapped in for the point at `index`, chosen via output `dimension`.
    Replaced { index: usize, dimension: usize },
    /// Posterior variance below the median in every output dimension.
    RejectedLowInfo,
    /// Residual too large relative to posterior + noise std in some dimension.
    RejectedOutlier,
}

/// Per-point, per-output leave-one-out posterior variances of the training
/// set, via the identity sigma^2_{i,d} = 1/[(K + sigma_d^2 I)^{-1}]_{ii}
/// - sigma_d^2 (clamped at zero). Row i holds the variances at z_i when point
/// i is left out; one column per output dimension.
pub fn loo_variances(model: &GpModel) -> Vec<Vec<f64>> {
    let n = model.dataset().len();
    let n_y = model.n_outputs();
    let mut table = vec![vec![0.0; n_y]; n];
    for d in 0..n_y {
        let inv_diag = model.inverse_diagonal(d);
        let noise = model.noise()[d];
        for i in 0..n {
            table[i][d] = (1.0 / inv_diag[i] - noise).max(0.0);
        }
    }
    table
}

/// True when the candidate's residual against the model exceeds
/// k_out * (posterior std + noise std) in any output dimension (strictly).
pub fn reject_outlier(model: &GpModel, candidate: &Observation, policy: &SelectionPolicy) -> bool {
    let (mu, var) = model.predict(&candidate.z);
    for d in 0..model.n_outputs() {
        let spread = var[d].max(0.0).sqrt() + model.noise()[d].max(0.0).sqrt();
        if (candidate.y[d] - mu[d]).abs() > policy.outlier_multiplier * spread {
            return true;
        }
    }
    false
}

/// Decide whether `candidate` enters the dataset, mutating it accordingly.
///
/// The model is the one fitted at the last retrain and is *not* refit here;
/// decisions within an iteration deliberately use the stale model. The
/// candidate is admitted when its posterior variance strictly exceeds the
/// median leave-one-out variance in at least one output dimension. At
/// capacity the point with the smallest leave-one-out variance is replaced;
/// when that minimizer differs across output dimensions, the dimension with
/// the largest ratio (candidate variance / min leave-one-out variance) wins.
/// Ties are broken by the lowest index.
pub fn consider(
    dataset: &mut GpDataset,
    model: &GpModel,
    candidate: Observation,
    policy: &SelectionPolicy,
) -> SelectionOutcome {
    if reject_outlier(model, &candidate, policy) {
        return SelectionOutcome::RejectedOutlier;
    }

    let (_, cand_var) = model.predict(&candidate.z);
    let loo = loo_variances(model);
    let n_y = model.n_outputs();

    let mut informative = false;
    for d in 0..n_y {
        let med = median(loo.iter().map(|row| row[d]));
        if cand_var[d] > med {
            informative = true;
            break;
        }
    }
    if !informative {
        return SelectionOutcome::RejectedLowInfo;
    }

    if dataset.len() < policy.capacity {
        dataset.push(candidate);
        return SelectionOutcome::Added;
    }

    // Per dimension, locate the smallest leave-one-out variance (lowest index
    // on ties), then pick the dimension where the candidate stands out most.
    let mut best_dim = 0;
    let mut best_index = 0;
    let mut best_ratio = f64::NEG_INFINITY;
    for d in 0..n_y {
        let mut min_idx = 0;
        let mut min_var = f64::INFINITY;
        for (i, row) in loo.iter().enumerate() {
            if row[d] < min_var {
                min_var = row[d];
                min_idx = i;
            }
        }
        let ratio = if min_var > 0.0 { cand_var[d] / min_var } else { f64::INFINITY };
        if ratio > best_ratio {
            best_ratio = ratio;
            best_dim = d;
            best_index = min_idx;
        }
    }
    dataset.replace(best_index, candidate);
    SelectionOutcome::Replaced { index: best_index, dimension: best_dim }
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
