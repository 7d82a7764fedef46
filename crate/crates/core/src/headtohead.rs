//! Head-to-head racing: a GP model of the opponent's closed-loop behavior in
//! relative coordinates, sampled multi-step opponent prediction, an
//! exploration-augmented racing controller with soft collision ellipses, a
//! blocking opponent, and race simulation with data logging.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataselect::{consider, SelectionOutcome, SelectionPolicy};
use crate::explore::{build_grid, select_target, CandidateGrid, ExplorationConfig, StalemateTracker};
use crate::gp::{
    fit, optimize_hyperparameters, GpDataset, GpError, GpModel, KernelFamily, KernelSpec,
    Observation, OptimizeSettings,
};
use crate::solver::{solve_qp_warm, QpProblem, QpSettings, SolveStatus};
use crate::track::Track;
use crate::vehicle::{
    euler_step, linearize, plant_step, ControlInput, PlantConfig, TireLaw, VehicleParams,
    VehicleState,
};

/// QP settings for the racing controllers: the mixed exploration/racing cost
/// spans several orders of magnitude, so a slightly relaxed tolerance keeps
/// the ADMM iterations practical without affecting the applied inputs.
const MPC_QP: QpSettings = QpSettings { tol: 1e-5, max_iter: 20_000 };

/// Ego-state row indices ([V_x, V_y, psi_dot, e_psi, e_y, s]).
const VX_ROW: usize = 0;
const EY_ROW: usize = 4;
const S_ROW: usize = 5;

/// Curvature look-ahead offsets (m) sampled into the opponent feature vector.
pub const LOOKAHEAD_OFFSETS: [f64; 3] = [5.0, 10.0, 15.0];

/// Number of opponent-feature dimensions the ego can influence
/// (relative s, relative e_y, own heading error, own speed).
pub const CONTROLLABLE_DIMS: usize = 4;

/// Feature dimension: 4 controllable + opponent heading/speed + 3 curvatures.
pub const FEATURE_DIM: usize = 9;

/// Signed difference a-b along the track, wrapped into (-L/2, L/2] on closed
/// tracks so the shorter way around wins.
pub fn wrap_rel(track: &Track, ds: f64) -> f64 {
    if !track.closed {
        return ds;
    }
    let l = track.total_length();
    let mut d = ds.rem_euclid(l);
    if d > 0.5 * l {
        d -= l;
    }
    d
}

// ---------------------------------------------------------------------------
// opponent model
// ---------------------------------------------------------------------------

/// Opponent state in track coordinates: [s, e_y, e_psi, V_x].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpponentState {
    pub s: f64,
    pub e_y: f64,
    pub e_psi: f64,
    pub v_x: f64,
}

impl OpponentState {
    pub fn to_array(&self) -> [f64; 4] {
        [self.s, self.e_y, self.e_psi, self.v_x]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { s: a[0], e_y: a[1], e_psi: a[2], v_x: a[3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpponentInput {
    pub delta: f64,
    pub a_x: f64,
}

impl OpponentInput {
    pub fn zero() -> Self {
        Self { delta: 0.0, a_x: 0.0 }
    }
}

/// Kinematic single-track opponent: plant parameters, body dimensions, and
/// input/speed limits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpponentParams {
    pub wheelbase: f64,
    pub length: f64,
    pub width: f64,
    pub delta_bounds: (f64, f64),
    pub ax_bounds: (f64, f64),
    pub v_max: f64,
    pub substeps: usize,
}

impl Default for OpponentParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            length: 4.0,
            width: 1.8,
            delta_bounds: (-0.4, 0.4),
            ax_bounds: (-3.0, 3.0),
            v_max: 8.0,
            substeps: 5,
        }
    }
}

/// Continuous kinematic bicycle dynamics in the track frame.
pub fn opponent_dynamics(
    xi: &OpponentState,
    u: &OpponentInput,
    p: &OpponentParams,
    track: &Track,
) -> [f64; 4] {
    let kappa = track.curvature_at(xi.s);
    let mut den = 1.0 - kappa * xi.e_y;
    if den < 0.1 {
        den = 0.1;
    }
    let s_dot = xi.v_x * xi.e_psi.cos() / den;
    [
        s_dot,
        xi.v_x * xi.e_psi.sin(),
        xi.v_x * u.delta.tan() / p.wheelbase - kappa * s_dot,
        u.a_x,
    ]
}

/// Substepped Euler integration without the speed clamp; used for
/// linearization and open-loop prediction so derivatives stay smooth.
pub fn opponent_step_free(
    xi: &OpponentState,
    u: &OpponentInput,
    p: &OpponentParams,
    track: &Track,
    t: f64,
) -> OpponentState {
    let dt = t / p.substeps as f64;
    let mut cur = *xi;
    for _ in 0..p.substeps {
        let d = opponent_dynamics(&cur, u, p, track);
        cur.s += dt * d[0];
        cur.e_y += dt * d[1];
        cur.e_psi += dt * d[2];
        cur.v_x += dt * d[3];
    }
    cur
}

/// Simulation step: as `opponent_step_free` but with the speed held in
/// [0, v_max] after every substep.
pub fn opponent_step(
    xi: &OpponentState,
    u: &OpponentInput,
    p: &OpponentParams,
    track: &Track,
    t: f64,
) -> OpponentState {
    let dt = t / p.substeps as f64;
    let mut cur = *xi;
    for _ in 0..p.substeps {
        let d = opponent_dynamics(&cur, u, p, track);
        cur.s += dt * d[0];
        cur.e_y += dt * d[1];
        cur.e_psi += dt * d[2];
        cur.v_x = (cur.v_x + dt * d[3]).clamp(0.0, p.v_max);
    }
    cur
}

/// Relative-configuration feature vector:
/// [s^O - s, e_y^O - e_y, e_psi, V_x, e_psi^O, V_x^O, kappa at three
/// look-ahead points ahead of the opponent]. The longitudinal gap is wrapped
/// on closed tracks.
pub fn opponent_features(ego: &VehicleState, opp: &OpponentState, track: &Track) -> [f64; 9] {
    [
        wrap_rel(track, opp.s - ego.s),
        opp.e_y - ego.e_y,
        ego.e_psi,
        ego.v_x,
        opp.e_psi,
        opp.v_x,
        track.curvature_at(opp.s + LOOKAHEAD_OFFSETS[0]),
        track.curvature_at(opp.s + LOOKAHEAD_OFFSETS[1]),
        track.curvature_at(opp.s + LOOKAHEAD_OFFSETS[2]),
    ]
}

/// One GP step of the opponent policy: the model predicts the state
/// increment; returns the next-state mean and per-output variances.
pub fn opponent_gp_step(
    model: &GpModel,
    opp: &OpponentState,
    feature: &[f64],
) -> (OpponentState, [f64; 4]) {
    let (mu, var) = model.predict(feature);
    (
        OpponentState {
            s: opp.s + mu[0],
            e_y: opp.e_y + mu[1],
            e_psi: opp.e_psi + mu[2],
            v_x: opp.v_x + mu[3],
        },
        [var[0].max(0.0), var[1].max(0.0), var[2].max(0.0), var[3].max(0.0)],
    )
}

/// Sampled multi-step opponent forecast: per-step sample means and standard
/// deviations of [s, e_y, e_psi, V_x]; index 0 is the current state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpponentPrediction {
    pub means: Vec<OpponentState>,
    pub stds: Vec<[f64; 4]>,
}

/// Roll the opponent forward `n_steps` by sampling the per-output Gaussian of
/// the one-step GP and feeding each sample forward, pairing step k with the
/// ego's planned state at step k. Without a model the opponent coasts with
/// zero input and zero uncertainty. Deterministic in the seed.
#[allow(clippy::too_many_arguments)]
pub fn predict_opponent(
    model: Option<&GpModel>,
    opp: &OpponentState,
    ego_plan: &[VehicleState],
    opp_params: &OpponentParams,
    track: &Track,
    n_steps: usize,
    n_samples: usize,
    period: f64,
    seed: u64,
) -> OpponentPrediction {
    assert!(!ego_plan.is_empty(), "empty ego plan");
    let last = ego_plan.len() - 1;

    let Some(m) = model else {
        let mut means = Vec::with_capacity(n_steps + 1);
        means.push(*opp);
        let mut cur = *opp;
        for _ in 0..n_steps {
            cur = opponent_step_free(&cur, &OpponentInput::zero(), opp_params, track, period);
            means.push(cur);
        }
        return OpponentPrediction { means, stds: vec![[0.0; 4]; n_steps + 1] };
    };

    assert!(n_samples >= 1, "need at least one sample");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![[0.0f64; 4]; n_steps + 1];
    let mut sumsq = vec![[0.0f64; 4]; n_steps + 1];
    for _ in 0..n_samples {
        let mut cur = *opp;
        for (k, acc) in sum.iter_mut().enumerate() {
            if k > 0 {
                let z = opponent_features(&ego_plan[(k - 1).min(last)], &cur, track);
                let (mu, var) = opponent_gp_step(m, &cur, &z);
                let mut arr = mu.to_array();
                for (d, a) in arr.iter_mut().enumerate() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *a += var[d].sqrt() * n;
                }
                cur = OpponentState::from_array(arr);
            }
            let a = cur.to_array();
            for d in 0..4 {
                acc[d] += a[d];
                sumsq[k][d] += a[d] * a[d];
            }
        }
    }

    let nf = n_samples as f64;
    let mut means = Vec::with_capacity(n_steps + 1);
    let mut stds = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let mut mu = [0.0; 4];
        let mut sd = [0.0; 4];
        for d in 0..4 {
            mu[d] = sum[k][d] / nf;
            if n_samples > 1 {
                // unbiased sample variance, clamped against cancellation
                let var = (sumsq[k][d] - nf * mu[d] * mu[d]) / (nf - 1.0);
                sd[d] = var.max(0.0).sqrt();
            }
        }
        means.push(OpponentState::from_array(mu));
        stds.push(sd);
    }
    OpponentPrediction { means, stds }
}

// ---------------------------------------------------------------------------
// collision ellipses
// ---------------------------------------------------------------------------

/// Axis-aligned keep-out ellipse around a predicted opponent position.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CollisionEllipse {
    pub s: f64,
    pub e_y: f64,
    pub a: f64,
    pub b: f64,
}

/// One ellipse per prediction step: the minimum ellipse covering the
/// opponent's body rectangle (semi-axes L/sqrt2, W/sqrt2), grown by half the
/// ego body and by n_sigma prediction standard deviations per axis.
pub fn collision_ellipses(
    pred: &OpponentPrediction,
    opp_params: &OpponentParams,
    cfg: &H2hConfig,
) -> Vec<CollisionEllipse> {
    let a0 = opp_params.length / std::f64::consts::SQRT_2;
    let b0 = opp_params.width / std::f64::consts::SQRT_2;
    pred.means
        .iter()
        .zip(&pred.stds)
        .map(|(m, sd)| CollisionEllipse {
            s: m.s,
            e_y: m.e_y,
            a: a0
                + cfg.ego_length / 2.0
                + cfg.margin_long
                + (cfg.n_sigma * sd[0]).min(cfg.max_inflation_long),
            b: b0
                + cfg.ego_width / 2.0
                + cfg.margin_lat
                + (cfg.n_sigma * sd[1]).min(cfg.max_inflation_lat),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// ego racing controller
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct H2hConfig {
    pub n_horizon: usize,
    pub period: f64,
    /// Center-line penalty on e_y in the racing cost.
    pub q_c: f64,
    /// Progress reward weight on terminal arc length (the blocking opponent
    /// uses half of it).
    pub q_s: f64,
    /// Diagonal exploration tracking weights over [V_x, V_y, psi_dot, e_psi,
    /// e_y, s].
    pub q_explore: [f64; 6],
    /// Magnitude weights on (delta, a_x).
    pub r_input: [f64; 2],
    /// Rate weights on (delta, a_x) differences along the horizon.
    pub r_rate: [f64; 2],
    /// Opponent rollout samples per prediction.
    pub n_samples: usize,
    /// Ellipse inflation in prediction standard deviations.
    pub n_sigma: f64,
    /// Caps on the uncertainty inflation (m) so a poor model can never grow
    /// the keep-out region beyond what leaves a drivable gap.
    pub max_inflation_long: f64,
    pub max_inflation_lat: f64,
    /// Planning-only safety margins (m) added to the keep-out semi-axes so
    /// plant tracking error cannot turn a tight plan into body contact.
    pub margin_long: f64,
    pub margin_lat: f64,
    /// Linear and quadratic penalties on the collision slack.
    pub slack_linear: f64,
    pub slack_quadratic: f64,
    pub ego_length: f64,
    pub ego_width: f64,
    pub delta_bounds: (f64, f64),
    pub ax_bounds: (f64, f64),
    pub v_bounds: (f64, f64),
    /// Opponent blocking weight on (e_y^O - e_y^ego)^2.
    pub q_block: f64,
    pub opp_q_c: f64,
    pub opp_r_input: [f64; 2],
    pub opp_r_rate: [f64; 2],
}

impl Default for H2hConfig {
    fn default() -> Self {
        Self {
            n_horizon: 10,
            period: 0.1,
            q_c: 0.5,
            q_s: 2.0,
            q_explore: [4.0, 0.0, 0.0, 4.0, 10.0, 1.0],
            r_input: [0.5, 0.05],
            r_rate: [20.0, 1.0],
            n_samples: 50,
            n_sigma: 2.0,
            max_inflation_long: 3.0,
            max_inflation_lat: 1.2,
            margin_long: 0.75,
            margin_lat: 0.4,
            slack_linear: 50.0,
            slack_quadratic: 500.0,
            ego_length: 4.0,
            ego_width: 1.8,
            delta_bounds: (-0.4, 0.4),
            ax_bounds: (-10.0, 5.0),
            // the floor keeps planned states out of the low-speed regime where
            // the linearized tire dynamics turn stiff at this sample period
            v_bounds: (2.0, 12.0),
            q_block: 5.0,
            opp_q_c: 0.5,
            opp_r_input: [0.5, 0.05],
            opp_r_rate: [20.0, 1.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct H2hSolution {
    /// Predicted ego states including the current one (length N+1).
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    /// Collision slack per predicted step 1..N.
    pub slacks: Vec<f64>,
    pub status: SolveStatus,
    pub(crate) qp_x: DVector<f64>,
    pub(crate) qp_duals: DVector<f64>,
}

fn ego_nominal(
    xi: &VehicleState,
    prev: Option<&H2hSolution>,
    track: &Track,
    params: &VehicleParams,
    cfg: &H2hConfig,
) -> (Vec<VehicleState>, Vec<ControlInput>) {
    let n = cfg.n_horizon;
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n);
    states.push(*xi);
    match prev {
        Some(p) if p.states.len() == n + 1 => {
            for k in 1..=n {
                states.push(p.states[(k + 1).min(n)]);
            }
            for k in 0..n {
                inputs.push(p.inputs[(k + 1).min(n - 1)]);
            }
        }
        _ => {
            let u0 = ControlInput::zero();
            let mut cur = *xi;
            for _ in 0..n {
                cur = euler_step(&cur, &u0, params, track, cfg.period, TireLaw::Linear)
                    .unwrap_or(cur);
                states.push(cur);
                inputs.push(u0);
            }
        }
    }
    (states, inputs)
}

fn ego_fallback(xi: &VehicleState, cfg: &H2hConfig, n: usize) -> H2hSolution {
    // drive the speed back toward the floor: brake from above, accelerate
    // gently from below so the controller can always recover from a stall
    let a_x = ((cfg.v_bounds.0 - xi.v_x) / cfg.period).clamp(cfg.ax_bounds.0, 2.0);
    let u = ControlInput { delta: 0.0, a_x };
    H2hSolution {
        states: vec![*xi; n + 1],
        inputs: vec![u; n],
        slacks: vec![0.0; n],
        status: SolveStatus::Infeasible,
        qp_x: DVector::zeros(0),
        qp_duals: DVector::zeros(0),
    }
}

/// One step of the racing controller. The cost blends exploration tracking
/// (weight alpha, against `reference` when given) with racing terms (weight
/// 1-alpha): center-line penalty, input magnitude/rate penalties, and a
/// terminal progress reward linearized about the nominal trajectory.
/// Collision ellipses enter as linearized soft constraints with per-step
/// slacks; track edges, speed, and inputs are hard bounds. Falls back to
/// straight-line braking when the QP is infeasible.
#[allow(clippy::too_many_arguments)]
pub fn h2h_mpc_step(
    xi: &VehicleState,
    reference: Option<&[VehicleState]>,
    ellipses: &[CollisionEllipse],
    alpha: f64,
    prev: Option<&H2hSolution>,
    last_input: &ControlInput,
    track: &Track,
    params: &VehicleParams,
    cfg: &H2hConfig,
) -> (ControlInput, H2hSolution) {
    let n = cfg.n_horizon;
    // below the speed floor the linearized tire dynamics are too stiff for a
    // useful QP; recover open-loop until the floor is back in reach
    if xi.v_x < 0.75 * cfg.v_bounds.0 {
        let fb = ego_fallback(xi, cfg, n);
        return (fb.inputs[0], fb);
    }
    let track_explore = alpha > 0.0 && reference.map_or(false, |r| r.len() >= n);
    let w = 1.0 - if track_explore { alpha } else { 0.0 };
    // keep the QP well conditioned in the input directions at high alpha
    let wi = w.max(0.05);

    let (bar_x, bar_u) = ego_nominal(xi, prev, track, params, cfg);
    let mut lins = Vec::with_capacity(n);
    for k in 0..n {
        match linearize(&bar_x[k], &bar_u[k], params, track, cfg.period) {
            Ok(l) => lins.push(l),
            Err(_) => {
                let fb = ego_fallback(xi, cfg, n);
                return (fb.inputs[0], fb);
            }
        }
    }

    // variables: states x_1..x_N, inputs u_0..u_{N-1}, slacks z_1..z_N
    let nv = 9 * n;
    let sx = |k: usize| (k - 1) * 6;
    let su = |k: usize| 6 * n + 2 * k;
    let sz = |k: usize| 8 * n + (k - 1);

    let mut h = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    if track_explore {
        let r = reference.unwrap();
        for k in 1..=n {
            let ra = r[k - 1].to_array();
            for i in 0..6 {
                h[(sx(k) + i, sx(k) + i)] += 2.0 * alpha * cfg.q_explore[i];
                g[sx(k) + i] += -2.0 * alpha * cfg.q_explore[i] * ra[i];
            }
        }
    }
    for k in 1..=n {
        h[(sx(k) + EY_ROW, sx(k) + EY_ROW)] += 2.0 * w * cfg.q_c;
    }
    // progress reward measured from the current position so the
    // linearization stays scale-free; floored so it never dies out at low
    // speed
    let progress = (bar_x[n].s - xi.s).max(1.0);
    g[sx(n) + S_ROW] += -2.0 * w * cfg.q_s * progress;

    for k in 0..n {
        let di = su(k);
        for j in 0..2 {
            h[(di + j, di + j)] += 2.0 * wi * cfg.r_input[j];
            let rd = 2.0 * wi * cfg.r_rate[j];
            h[(di + j, di + j)] += rd;
            if k == 0 {
                let lu = [last_input.delta, last_input.a_x];
                g[di + j] += -rd * lu[j];
            } else {
                let dp = su(k - 1);
                h[(dp + j, dp + j)] += rd;
                h[(di + j, dp + j)] += -rd;
                h[(dp + j, di + j)] += -rd;
            }
        }
    }
    for k in 1..=n {
        g[sz(k)] += cfg.slack_linear;
        h[(sz(k), sz(k))] += 2.0 * cfg.slack_quadratic;
    }
    let mut qp = QpProblem::new(h, g);

    // dynamics equalities
    let mut a_eq = DMatrix::zeros(6 * n, nv);
    let mut b_eq = DVector::zeros(6 * n);
    let xi_arr = xi.to_array();
    for k in 0..n {
        let lin = &lins[k];
        let row0 = 6 * k;
        for i in 0..6 {
            a_eq[(row0 + i, sx(k + 1) + i)] = 1.0;
            for j in 0..2 {
                a_eq[(row0 + i, su(k) + j)] = -lin.b[i][j];
            }
            let mut rhs = lin.d[i];
            if k == 0 {
                for j in 0..6 {
                    rhs += lin.a[i][j] * xi_arr[j];
                }
            } else {
                for j in 0..6 {
                    a_eq[(row0 + i, sx(k) + j)] = -lin.a[i][j];
                }
            }
            b_eq[row0 + i] = rhs;
        }
    }
    qp.add_equalities(a_eq, b_eq);

    let use_ellipses = ellipses.len() >= n + 1;
    let m_in = 6 * n + if use_ellipses { n } else { 0 };
    let mut a_in = DMatrix::zeros(m_in, nv);
    let mut lo = DVector::zeros(m_in);
    let mut up = DVector::zeros(m_in);
    let big = 1e9;
    let mut row = 0;
    for k in 1..=n {
        // track corridor with half the body width as margin, softened by the
        // step slack so carried momentum can never make the QP infeasible
        let (w_l, w_r) = track.width_at(bar_x[k].s);
        a_in[(row, sx(k) + EY_ROW)] = 1.0;
        a_in[(row, sz(k))] = -1.0;
        lo[row] = -big;
        up[row] = w_l - cfg.ego_width / 2.0;
        row += 1;
        a_in[(row, sx(k) + EY_ROW)] = 1.0;
        a_in[(row, sz(k))] = 1.0;
        lo[row] = w_r + cfg.ego_width / 2.0;
        up[row] = big;
        row += 1;
        // speed bounds; the floor never cuts off the current state so the
        // problem stays feasible after a stall
        a_in[(row, sx(k) + VX_ROW)] = 1.0;
        lo[row] = cfg.v_bounds.0.min(xi.v_x);
        up[row] = cfg.v_bounds.1;
        row += 1;
        // slack nonnegativity
        a_in[(row, sz(k))] = 1.0;
        lo[row] = 0.0;
        up[row] = big;
        row += 1;
    }
    for k in 0..n {
        a_in[(row, su(k))] = 1.0;
        lo[row] = cfg.delta_bounds.0;
        up[row] = cfg.delta_bounds.1;
        row += 1;
        a_in[(row, su(k) + 1)] = 1.0;
        lo[row] = cfg.ax_bounds.0;
        up[row] = cfg.ax_bounds.1;
        row += 1;
    }
    if use_ellipses {
        for k in 1..=n {
            let e = &ellipses[k];
            let ds = wrap_rel(track, bar_x[k].s - e.s);
            let mut dy = bar_x[k].e_y - e.e_y;
            if dy.abs() < 0.3 {
                // nominal nearly aligned with the predicted center: the pure
                // linearization would only push backward along the track, so
                // bias the lateral expansion point toward the side with more
                // room to break the symmetry
                let (w_l, w_r) = track.width_at(bar_x[k].s);
                let sign = if w_l - e.e_y >= e.e_y - w_r { 1.0 } else { -1.0 };
                dy = 0.3 * sign;
            }
            let c0 = 1.0 - (ds / e.a).powi(2) - (dy / e.b).powi(2);
            let gs = -2.0 * ds / (e.a * e.a);
            let gy = -2.0 * dy / (e.b * e.b);
            // linearized keep-out: c0 + gs*(s-s_bar) + gy*(e-e_lin) <= slack,
            // expanded about the (possibly biased) lateral point
            a_in[(row, sx(k) + S_ROW)] = gs;
            a_in[(row, sx(k) + EY_ROW)] = gy;
            a_in[(row, sz(k))] = -1.0;
            lo[row] = -big;
            up[row] = -c0 + gs * bar_x[k].s + gy * (e.e_y + dy);
            row += 1;
        }
    }
    debug_assert_eq!(row, m_in);
    qp.add_inequalities(a_in, lo, up);

    let warm = prev.and_then(|p| {
        (p.qp_x.len() == nv && p.qp_duals.len() == 6 * n + m_in)
            .then_some((&p.qp_x, &p.qp_duals))
    });
    let sol = solve_qp_warm(&qp, &MPC_QP, warm);
    if sol.status == SolveStatus::Infeasible {
        let fb = ego_fallback(xi, cfg, n);
        return (fb.inputs[0], fb);
    }

    let mut states = Vec::with_capacity(n + 1);
    states.push(*xi);
    for k in 1..=n {
        let mut arr = [0.0; 6];
        for (i, a) in arr.iter_mut().enumerate() {
            *a = sol.x[sx(k) + i];
        }
        states.push(VehicleState::from_array(arr));
    }
    // clamp to the input boxes so a not-fully-converged solution can never
    // command out-of-range inputs
    let inputs: Vec<ControlInput> = (0..n)
        .map(|k| ControlInput {
            delta: sol.x[su(k)].clamp(cfg.delta_bounds.0, cfg.delta_bounds.1),
            a_x: sol.x[su(k) + 1].clamp(cfg.ax_bounds.0, cfg.ax_bounds.1),
        })
        .collect();
    let slacks: Vec<f64> = (1..=n).map(|k| sol.x[sz(k)].max(0.0)).collect();
    let u0 = inputs[0];
    (u0, H2hSolution { states, inputs, slacks, status: sol.status, qp_x: sol.x, qp_duals: sol.duals })
}

// ---------------------------------------------------------------------------
// exploration reference
// ---------------------------------------------------------------------------

/// Pinned (uncontrollable) feature tail for grid variance evaluation:
/// opponent heading/speed and the three look-ahead curvatures.
pub fn pinned_tail(opp: &OpponentState, track: &Track) -> [f64; 5] {
    [
        opp.e_psi,
        opp.v_x,
        track.curvature_at(opp.s + LOOKAHEAD_OFFSETS[0]),
        track.curvature_at(opp.s + LOOKAHEAD_OFFSETS[1]),
        track.curvature_at(opp.s + LOOKAHEAD_OFFSETS[2]),
    ]
}

/// Recompute the weighted posterior variance of every grid candidate with the
/// current pinned tail appended to its controllable dimensions.
pub fn refresh_grid_variances(
    model: &GpModel,
    grid: &mut CandidateGrid,
    pinned: &[f64; 5],
    output_weights: &[f64],
) {
    grid.variances = grid
        .candidates
        .iter()
        .map(|c| {
            let mut z = Vec::with_capacity(FEATURE_DIM);
            z.extend_from_slice(c);
            z.extend_from_slice(pinned);
            let (_, var) = model.predict(&z);
            var.iter().zip(output_weights).map(|(v, wt)| wt * v.max(0.0)).sum()
        })
        .collect();
}

/// Turn a target relative configuration [ds, de_y, e_psi, V_x] into ego
/// reference states along the horizon, placing the ego relative to the
/// predicted opponent and clipping laterally into the track.
pub fn reference_from_target(
    ego: &VehicleState,
    pred: &OpponentPrediction,
    target: &[f64],
    track: &Track,
    cfg: &H2hConfig,
) -> Vec<VehicleState> {
    let n = cfg.n_horizon;
    let last = pred.means.len() - 1;
    let mut out = Vec::with_capacity(n);
    for k in 1..=n {
        let p = &pred.means[k.min(last)];
        let s_ref = ego.s + wrap_rel(track, p.s - target[0] - ego.s);
        let (w_l, w_r) = track.width_at(s_ref);
        let e_ref =
            (p.e_y - target[1]).clamp(w_r + cfg.ego_width / 2.0, w_l - cfg.ego_width / 2.0);
        out.push(VehicleState {
            v_x: target[3],
            v_y: 0.0,
            psi_dot: 0.0,
            e_psi: target[2],
            e_y: e_ref,
            s: s_ref,
        });
    }
    out
}

/// Select an exploration target from the grid against the current relative
/// configuration and expand it into a horizon reference.
#[allow(clippy::too_many_arguments)]
pub fn exploration_reference(
    ego: &VehicleState,
    opp: &OpponentState,
    pred: &OpponentPrediction,
    grid: &CandidateGrid,
    alpha: f64,
    reversed: bool,
    track: &Track,
    cfg: &H2hConfig,
) -> (Vec<VehicleState>, usize) {
    let z_now =
        vec![wrap_rel(track, opp.s - ego.s), opp.e_y - ego.e_y, ego.e_psi, ego.v_x];
    let (target, idx) = select_target(&z_now, grid, alpha, reversed);
    (reference_from_target(ego, pred, &target, track, cfg), idx)
}

// ---------------------------------------------------------------------------
// blocking opponent
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OppSolution {
    pub states: Vec<OpponentState>,
    pub inputs: Vec<OpponentInput>,
    pub status: SolveStatus,
    pub(crate) qp_x: DVector<f64>,
    pub(crate) qp_duals: DVector<f64>,
}

/// Finite-difference linearization of the discrete kinematic step:
/// x+ ~ A x + B u + d.
fn opponent_linearize(
    xi: &OpponentState,
    u: &OpponentInput,
    p: &OpponentParams,
    track: &Track,
    t: f64,
) -> ([[f64; 4]; 4], [[f64; 2]; 4], [f64; 4]) {
    let f0 = opponent_step_free(xi, u, p, track, t).to_array();
    let x0 = xi.to_array();
    let u0 = [u.delta, u.a_x];
    let mut a = [[0.0; 4]; 4];
    let mut b = [[0.0; 2]; 4];
    for j in 0..4 {
        let h = 1e-6 * (1.0 + x0[j].abs());
        let mut xp = x0;
        xp[j] += h;
        let fp = opponent_step_free(&OpponentState::from_array(xp), u, p, track, t).to_array();
        for i in 0..4 {
            a[i][j] = (fp[i] - f0[i]) / h;
        }
    }
    for j in 0..2 {
        let h = 1e-6 * (1.0 + u0[j].abs());
        let mut upert = *u;
        if j == 0 {
            upert.delta += h;
        } else {
            upert.a_x += h;
        }
        let fp = opponent_step_free(xi, &upert, p, track, t).to_array();
        for i in 0..4 {
            b[i][j] = (fp[i] - f0[i]) / h;
        }
    }
    let mut d = f0;
    for i in 0..4 {
        for j in 0..4 {
            d[i] -= a[i][j] * x0[j];
        }
        for j in 0..2 {
            d[i] -= b[i][j] * u0[j];
        }
    }
    (a, b, d)
}

fn opp_fallback(xi: &OpponentState, p: &OpponentParams, n: usize) -> OppSolution {
    // brake to a stop, never into reverse (the sim clamps speed at zero too)
    let u = OpponentInput { delta: 0.0, a_x: (-xi.v_x * 2.0).clamp(p.ax_bounds.0, 0.0) };
    OppSolution {
        states: vec![*xi; n + 1],
        inputs: vec![u; n],
        status: SolveStatus::Infeasible,
        qp_x: DVector::zeros(0),
        qp_duals: DVector::zeros(0),
    }
}

/// Blocking opponent controller: racing cost (centering, input penalties,
/// half the ego's progress reward) plus a mirroring penalty pulling its
/// lateral position onto the ego's current one, subject to track, speed, and
/// input bounds. Falls back to braking on solver failure.
#[allow(clippy::too_many_arguments)]
pub fn blocking_opponent_step(
    opp: &OpponentState,
    ego_e_y: f64,
    prev: Option<&OppSolution>,
    last_input: &OpponentInput,
    track: &Track,
    p: &OpponentParams,
    cfg: &H2hConfig,
) -> (OpponentInput, OppSolution) {
    let n = cfg.n_horizon;
    let t = cfg.period;
    const OS: usize = 0; // s row in the opponent state
    const OE: usize = 1; // e_y row
    const OV: usize = 3; // V_x row

    // nominal: shifted previous solution or zero-input coast
    let mut bar_x = Vec::with_capacity(n + 1);
    let mut bar_u = Vec::with_capacity(n);
    bar_x.push(*opp);
    match prev {
        Some(ps) if ps.states.len() == n + 1 => {
            for k in 1..=n {
                bar_x.push(ps.states[(k + 1).min(n)]);
            }
            for k in 0..n {
                bar_u.push(ps.inputs[(k + 1).min(n - 1)]);
            }
        }
        _ => {
            let mut cur = *opp;
            for _ in 0..n {
                cur = opponent_step_free(&cur, &OpponentInput::zero(), p, track, t);
                bar_x.push(cur);
                bar_u.push(OpponentInput::zero());
            }
        }
    }

    let nv = 4 * n + 2 * n;
    let sx = |k: usize| (k - 1) * 4;
    let su = |k: usize| 4 * n + 2 * k;

    let mut h = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    for k in 1..=n {
        let i = sx(k) + OE;
        h[(i, i)] += 2.0 * (cfg.opp_q_c + cfg.q_block);
        g[i] += -2.0 * cfg.q_block * ego_e_y;
    }
    let progress = (bar_x[n].s - opp.s).max(1.0);
    g[sx(n) + OS] += -2.0 * (0.5 * cfg.q_s) * progress;
    for k in 0..n {
        let di = su(k);
        for j in 0..2 {
            h[(di + j, di + j)] += 2.0 * cfg.opp_r_input[j];
            let rd = 2.0 * cfg.opp_r_rate[j];
            h[(di + j, di + j)] += rd;
            if k == 0 {
                let lu = [last_input.delta, last_input.a_x];
                g[di + j] += -rd * lu[j];
            } else {
                let dp = su(k - 1);
                h[(dp + j, dp + j)] += rd;
                h[(di + j, dp + j)] += -rd;
                h[(dp + j, di + j)] += -rd;
            }
        }
    }
    let mut qp = QpProblem::new(h, g);

    let mut a_eq = DMatrix::zeros(4 * n, nv);
    let mut b_eq = DVector::zeros(4 * n);
    let x0 = opp.to_array();
    for k in 0..n {
        let (a, b, d) = opponent_linearize(&bar_x[k], &bar_u[k], p, track, t);
        let row0 = 4 * k;
        for i in 0..4 {
            a_eq[(row0 + i, sx(k + 1) + i)] = 1.0;
            for j in 0..2 {
                a_eq[(row0 + i, su(k) + j)] = -b[i][j];
            }
            let mut rhs = d[i];
            if k == 0 {
                for j in 0..4 {
                    rhs += a[i][j] * x0[j];
                }
            } else {
                for j in 0..4 {
                    a_eq[(row0 + i, sx(k) + j)] = -a[i][j];
                }
            }
            b_eq[row0 + i] = rhs;
        }
    }
    qp.add_equalities(a_eq, b_eq);

    let m_in = 4 * n;
    let mut a_in = DMatrix::zeros(m_in, nv);
    let mut lo = DVector::zeros(m_in);
    let mut up = DVector::zeros(m_in);
    for k in 1..=n {
        let (w_l, w_r) = track.width_at(bar_x[k].s);
        a_in[(k - 1, sx(k) + OE)] = 1.0;
        lo[k - 1] = w_r + p.width / 2.0;
        up[k - 1] = w_l - p.width / 2.0;
        a_in[(n + k - 1, sx(k) + OV)] = 1.0;
        lo[n + k - 1] = 0.0;
        up[n + k - 1] = p.v_max;
    }
    for k in 0..n {
        a_in[(2 * n + 2 * k, su(k))] = 1.0;
        lo[2 * n + 2 * k] = p.delta_bounds.0;
        up[2 * n + 2 * k] = p.delta_bounds.1;
        a_in[(2 * n + 2 * k + 1, su(k) + 1)] = 1.0;
        lo[2 * n + 2 * k + 1] = p.ax_bounds.0;
        up[2 * n + 2 * k + 1] = p.ax_bounds.1;
    }
    qp.add_inequalities(a_in, lo, up);

    let warm = prev.and_then(|ps| {
        (ps.qp_x.len() == nv && ps.qp_duals.len() == 4 * n + m_in)
            .then_some((&ps.qp_x, &ps.qp_duals))
    });
    let sol = solve_qp_warm(&qp, &MPC_QP, warm);
    if sol.status == SolveStatus::Infeasible {
        let fb = opp_fallback(opp, p, n);
        return (fb.inputs[0], fb);
    }

    let mut states = Vec::with_capacity(n + 1);
    states.push(*opp);
    for k in 1..=n {
        let mut arr = [0.0; 4];
        for (i, a) in arr.iter_mut().enumerate() {
            *a = sol.x[sx(k) + i];
        }
        states.push(OpponentState::from_array(arr));
    }
    let inputs: Vec<OpponentInput> = (0..n)
        .map(|k| OpponentInput {
            delta: sol.x[su(k)].clamp(p.delta_bounds.0, p.delta_bounds.1),
            a_x: sol.x[su(k) + 1].clamp(p.ax_bounds.0, p.ax_bounds.1),
        })
        .collect();
    let u0 = inputs[0];
    (u0, OppSolution { states, inputs, status: sol.status, qp_x: sol.x, qp_duals: sol.duals })
}

// ---------------------------------------------------------------------------
// race simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaceConfig {
    pub h2h: H2hConfig,
    pub opponent: OpponentParams,
    pub exploration: ExplorationConfig,
    pub plant: PlantConfig,
    /// Simulated race duration cap (s).
    pub duration: f64,
    /// Extra time simulated after an overtake before ending the race (s).
    pub post_overtake: f64,
    /// Steps between grid-variance refreshes during exploration.
    pub grid_refresh_steps: usize,
    /// Lateral excursion beyond the track edge that aborts the race (m).
    pub abort_margin: f64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            h2h: H2hConfig::default(),
            opponent: OpponentParams::default(),
            exploration: ExplorationConfig {
                output_weights: vec![1.0; 4],
                ..ExplorationConfig::default()
            },
            plant: PlantConfig::default(),
            duration: 60.0,
            post_overtake: 1.5,
            grid_refresh_steps: 10,
            abort_margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaceStep {
    pub t: f64,
    pub ego: VehicleState,
    pub opp: OpponentState,
    pub alpha: f64,
    pub target_index: Option<usize>,
    pub slack_total: f64,
    /// Center distance in the (wrapped ds, de_y) plane.
    pub separation: f64,
    pub ego_qp_optimal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaceLog {
    pub steps: Vec<RaceStep>,
    /// Feature/next-state-increment pairs logged every step.
    pub samples: Vec<Observation>,
    pub overtake_time: Option<f64>,
    pub border_hits: usize,
    pub hard_collisions: usize,
    pub min_separation: f64,
    pub aborted: bool,
}

/// Simulate one race: the ego races (and explores when alpha > 0 and an
/// opponent model is available) against the blocking opponent on the
/// perturbed plant; every step logs the opponent feature and the opponent's
/// realized one-step increment. The race ends `post_overtake` seconds after
/// the ego passes, at the duration cap, or when the ego leaves the track.
#[allow(clippy::too_many_arguments)]
pub fn run_race(
    track: &Track,
    ego0: &VehicleState,
    opp0: &OpponentState,
    gp_opp: Option<&GpModel>,
    alpha: f64,
    seed: u64,
    params: &VehicleParams,
    cfg: &RaceConfig,
) -> RaceLog {
    let n = cfg.h2h.n_horizon;
    let t_step = cfg.h2h.period;
    let mut ego = *ego0;
    let mut opp = *opp0;
    let mut ego_total = ego0.s;
    let mut opp_total = opp0.s;
    let mut prev_ego: Option<H2hSolution> = None;
    let mut prev_opp: Option<OppSolution> = None;
    let mut last_u = ControlInput::zero();
    let mut last_uo = OpponentInput::zero();
    let mut tracker = StalemateTracker::default();
    let mut frozen_target: Option<(Vec<f64>, usize)> = None;

    let mut grid: Option<CandidateGrid> = None;
    if alpha > 0.0 {
        if let Some(m) = gp_opp {
            let hist: Vec<Vec<f64>> = m
                .dataset()
                .observations()
                .iter()
                .map(|o| o.z[..CONTROLLABLE_DIMS].to_vec())
                .collect();
            grid = build_grid(&hist, &cfg.exploration, seed).ok();
        }
    }

    let mut steps = Vec::new();
    let mut samples = Vec::new();
    let mut overtake: Option<f64> = None;
    let mut border_hits = 0usize;
    let mut hard_collisions = 0usize;
    let mut min_separation = f64::INFINITY;
    let mut aborted = false;
    let thresh = (cfg.h2h.ego_length + cfg.opponent.length) / 2.0;
    let a_hard = cfg.opponent.length / std::f64::consts::SQRT_2 + cfg.h2h.ego_length / 2.0;
    let b_hard = cfg.opponent.width / std::f64::consts::SQRT_2 + cfg.h2h.ego_width / 2.0;
    let n_total = (cfg.duration / t_step).round() as usize;

    for step_idx in 0..n_total {
        let t = step_idx as f64 * t_step;

        if let (Some(gr), Some(m)) = (grid.as_mut(), gp_opp) {
            if step_idx % cfg.grid_refresh_steps == 0 {
                let tail = pinned_tail(&opp, track);
                refresh_grid_variances(m, gr, &tail, &cfg.exploration.output_weights);
            }
        }

        let ds = wrap_rel(track, opp.s - ego.s);
        let dey = opp.e_y - ego.e_y;
        let frozen = tracker.step(ds, dey, &cfg.exploration);

        // plan in the ego's longitudinal frame so the horizon never spans a
        // wrap discontinuity
        let opp_local = OpponentState { s: ego.s + ds, ..opp };
        let ego_plan: Vec<VehicleState> = match prev_ego.as_ref() {
            Some(p) if p.states.len() == n + 1 => p.states.clone(),
            _ => vec![ego; n + 1],
        };
        let pred_seed = seed ^ (step_idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let pred = predict_opponent(
            gp_opp,
            &opp_local,
            &ego_plan,
            &cfg.opponent,
            track,
            n,
            cfg.h2h.n_samples,
            t_step,
            pred_seed,
        );
        let ellipses = collision_ellipses(&pred, &cfg.opponent, &cfg.h2h);

        let (reference, target_index, alpha_eff) = match grid.as_ref() {
            Some(gr) => {
                let z_now = vec![ds, dey, ego.e_psi, ego.v_x];
                let (target, idx) = if frozen {
                    frozen_target
                        .get_or_insert_with(|| select_target(&z_now, gr, alpha, true))
                        .clone()
                } else {
                    frozen_target = None;
                    select_target(&z_now, gr, alpha, false)
                };
                (
                    Some(reference_from_target(&ego, &pred, &target, track, &cfg.h2h)),
                    Some(idx),
                    alpha,
                )
            }
            None => (None, None, 0.0),
        };

        let (u, sol) = h2h_mpc_step(
            &ego,
            reference.as_deref(),
            &ellipses,
            alpha_eff,
            prev_ego.as_ref(),
            &last_u,
            track,
            params,
            &cfg.h2h,
        );
        let (uo, osol) =
            blocking_opponent_step(&opp, ego.e_y, prev_opp.as_ref(), &last_uo, track, &cfg.opponent, &cfg.h2h);

        let feature = opponent_features(&ego, &opp, track);
        let separation = (ds * ds + dey * dey).sqrt();
        min_separation = min_separation.min(separation);
        if (ds / a_hard).powi(2) + (dey / b_hard).powi(2) < 1.0 {
            hard_collisions += 1;
        }
        steps.push(RaceStep {
            t,
            ego,
            opp,
            alpha: alpha_eff,
            target_index,
            slack_total: sol.slacks.iter().sum(),
            separation,
            ego_qp_optimal: sol.status == SolveStatus::Optimal,
        });

        let ego_new = match plant_step(&ego, &u, params, &cfg.plant, track, t_step) {
            Ok(x) => x,
            Err(_) => {
                aborted = true;
                break;
            }
        };
        let opp_new = opponent_step(&opp, &uo, &cfg.opponent, track, t_step);
        samples.push(Observation::new(
            feature.to_vec(),
            vec![
                opp_new.s - opp.s,
                opp_new.e_y - opp.e_y,
                opp_new.e_psi - opp.e_psi,
                opp_new.v_x - opp.v_x,
            ],
        ));

        let rel_old = ego_total - opp_total;
        ego_total += wrap_rel(track, ego_new.s - ego.s);
        opp_total += opp_new.s - opp.s;
        let rel_new = ego_total - opp_total;

        let (w_l, w_r) = track.width_at(ego_new.s);
        if ego_new.e_y > w_l - cfg.h2h.ego_width / 2.0 + 1e-6
            || ego_new.e_y < w_r + cfg.h2h.ego_width / 2.0 - 1e-6
        {
            border_hits += 1;
        }
        ego = ego_new;
        opp = opp_new;
        last_u = u;
        last_uo = uo;
        prev_ego = Some(sol);
        prev_opp = Some(osol);
        if ego.e_y > w_l + cfg.abort_margin || ego.e_y < w_r - cfg.abort_margin {
            aborted = true;
            break;
        }

        match overtake {
            None => {
                if rel_new > thresh {
                    let frac = if (rel_new - rel_old).abs() > 1e-12 {
                        ((thresh - rel_old) / (rel_new - rel_old)).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    overtake = Some(t + frac * t_step);
                }
            }
            // hysteresis: stay flagged unless the gap collapses to half the
            // overtake threshold
            Some(_) if rel_new < 0.5 * thresh => overtake = None,
            Some(t_ov) => {
                if t + t_step >= t_ov + cfg.post_overtake {
                    break;
                }
            }
        }
    }

    RaceLog {
        steps,
        samples,
        overtake_time: overtake,
        border_hits,
        hard_collisions,
        min_separation,
        aborted,
    }
}

// ---------------------------------------------------------------------------
// dataset building and evaluation
// ---------------------------------------------------------------------------

/// Feed logged samples into the opponent dataset: plain pushes until the
/// dataset supports a model fit, then the diverse-selection policy with a
/// refit after every accepted change. Returns the number of accepted changes.
pub fn absorb_samples(
    dataset: &mut GpDataset,
    samples: &[Observation],
    policy: &SelectionPolicy,
    kernel: &KernelSpec,
    noise: &[f64],
    min_fit: usize,
) -> usize {
    let mut changed = 0usize;
    let mut model: Option<GpModel> = None;
    for obs in samples {
        if !obs.is_finite() {
            continue;
        }
        if dataset.len() < min_fit.max(2) {
            if !dataset.is_full() {
                dataset.push(obs.clone());
                changed += 1;
            }
            continue;
        }
        if model.is_none() {
            model = fit(dataset, kernel, noise).ok();
        }
        let Some(m) = model.as_ref() else { break };
        match consider(dataset, m, obs.clone(), policy) {
            SelectionOutcome::Added | SelectionOutcome::Replaced { .. } => {
                changed += 1;
                model = None;
            }
            _ => {}
        }
    }
    changed
}

/// Fit the opponent GP on the collected increments: Matern-3/2 kernel,
/// optionally with evidence-maximized hyperparameters, falling back to a
/// fixed kernel.
pub fn fit_opponent_gp(
    dataset: &GpDataset,
    noise: &[f64],
    hyperopt: Option<(&OptimizeSettings, u64)>,
) -> Result<GpModel, GpError> {
    if let Some((settings, seed)) = hyperopt {
        if let Ok(hp) = optimize_hyperparameters(dataset, KernelFamily::Matern32, noise, settings, seed)
        {
            if let Ok(m) = fit(dataset, &hp.kernel, &hp.noise) {
                return Ok(m);
            }
        }
    }
    fit(dataset, &KernelSpec::matern32(3.0), noise)
}

/// Open-loop multi-step prediction errors against a logged race: for every
/// start step, roll the GP mean forward using the logged ego states and
/// collect the absolute lateral error per horizon step. Returns one error
/// list per step 1..=n_steps.
pub fn prediction_errors(
    model: &GpModel,
    log: &RaceLog,
    track: &Track,
    n_steps: usize,
) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); n_steps];
    let m = log.steps.len();
    if m <= n_steps {
        return out;
    }
    for t0 in 0..m - n_steps {
        let mut st = log.steps[t0].opp;
        for k in 1..=n_steps {
            let ego_k = &log.steps[t0 + k - 1].ego;
            let z = opponent_features(ego_k, &st, track);
            let (next, _) = opponent_gp_step(model, &st, &z);
            st = next;
            out[k - 1].push((st.e_y - log.steps[t0 + k].opp.e_y).abs());
        }
    }
    out
}
