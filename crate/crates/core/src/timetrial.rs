//! Minimum-lap-time stack: residual measurement against the nominal model,
//! chance-constrained tracking MPC with GP compensation, a spatial-domain
//! minimum-time planner, and the per-iteration explore/track/refit loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataselect::{consider, SelectionPolicy};
use crate::explore::{build_grid, precompute_variances, select_target, ExplorationConfig};
use crate::gp::{fit, optimize_hyperparameters, GpDataset, GpModel, KernelSpec, Observation, OptimizeSettings};
use crate::solver::{solve_qp_warm, QpProblem, QpSettings, SolveStatus, SqpModel, SqpSettings, SqpStatus};
use crate::track::Track;
use crate::vehicle::{
    continuous_dynamics, euler_step, linearize, plant_step, ControlInput, PlantConfig, TireLaw,
    VehicleParams, VehicleState,
};

const VY_ROW: usize = 1;
const PSIDOT_ROW: usize = 2;
const EY_ROW: usize = 4;

// ---------------------------------------------------------------------------
// error function and its inverse
// ---------------------------------------------------------------------------

/// Error function via the all-positive-term series
/// erf(x) = 2/√π · x e^{−x²} Σ (2x²)ⁿ / (2n+1)!!, accurate to ~1e-15.
pub fn erf(x: f64) -> f64 {
    let ax = x.abs();
    if ax > 6.0 {
        return 1.0_f64.copysign(x);
    }
    let x2 = x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut n = 1.0;
    loop {
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
        n += 1.0;
    }
    2.0 / std::f64::consts::PI.sqrt() * x * (-x2).exp() * sum
}

/// Inverse error function by bisection on `erf` to 1e-12.
pub fn erfinv(p: f64) -> f64 {
    assert!(p > -1.0 && p < 1.0, "erfinv domain");
    if p == 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 6.0_f64);
    let target = p.abs();
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if erf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).copysign(p)
}

/// Corridor tightening γ = √2 σ erfinv(2β−1), clamped at 0 for β ≤ 0.5.
/// `printed_variant` substitutes erf for erfinv (kept for comparison; it does
/// not reproduce the intended violation rates).
pub fn tightening(sigma_ey: f64, beta: f64, printed_variant: bool) -> f64 {
    assert!(sigma_ey >= 0.0 && (0.0..1.0).contains(&beta));
    let arg = 2.0 * beta - 1.0;
    let q = if printed_variant { erf(arg) } else { erfinv(arg) };
    (std::f64::consts::SQRT_2 * sigma_ey * q).max(0.0)
}

// ---------------------------------------------------------------------------
// residual measurement
// ---------------------------------------------------------------------------

/// One training sample for both GP datasets: the tracking residual (discrete
/// state mismatch on the V_y and ψ̇ rows) and the planning residual (the same
/// mismatch expressed as a derivative, y_plan = y_mpc / T).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualSample {
    pub z: [f64; 3],
    pub y_mpc: [f64; 2],
    pub y_plan: [f64; 2],
}

pub fn measure_residuals(
    xi_t: &VehicleState,
    u_t: &ControlInput,
    xi_next: &VehicleState,
    track: &Track,
    params: &VehicleParams,
    period: f64,
) -> ResidualSample {
    let pred = euler_step(xi_t, u_t, params, track, period, TireLaw::Linear)
        .unwrap_or(*xi_t);
    let y_mpc = [xi_next.v_y - pred.v_y, xi_next.psi_dot - pred.psi_dot];
    ResidualSample {
        z: [xi_t.v_y, xi_t.psi_dot, u_t.delta],
        y_mpc,
        y_plan: [y_mpc[0] / period, y_mpc[1] / period],
    }
}

// ---------------------------------------------------------------------------
// covariance propagation
// ---------------------------------------------------------------------------

/// Σ_{k+1} = A_k Σ_k A_kᵀ + Σ^MPC_k with Σ_0 = 0; `sigma_mpc[k]` holds the GP
/// output variances for (V_y, ψ̇), embedded on those rows/cols. Returns
/// Σ_1..Σ_N.
pub fn propagate_covariance(a_seq: &[[[f64; 6]; 6]], sigma_mpc: &[[f64; 2]]) -> Vec<DMatrix<f64>> {
    assert_eq!(a_seq.len(), sigma_mpc.len());
    let mut out = Vec::with_capacity(a_seq.len());
    let mut cov = DMatrix::zeros(6, 6);
    for (a, sm) in a_seq.iter().zip(sigma_mpc) {
        let am = DMatrix::from_fn(6, 6, |i, j| a[i][j]);
        cov = &am * cov * am.transpose();
        cov[(VY_ROW, VY_ROW)] += sm[0];
        cov[(PSIDOT_ROW, PSIDOT_ROW)] += sm[1];
        // enforce symmetry against drift
        cov = (&cov + cov.transpose()) * 0.5;
        out.push(cov.clone());
    }
    out
}

// ---------------------------------------------------------------------------
// tracking MPC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackingMpcConfig {
    pub n_horizon: usize,
    pub period: f64,
    /// Diagonal state weights over [V_x, V_y, ψ̇, e_ψ, e_y, s].
    pub q: [f64; 6],
    /// Weight on the steering-rate chain (δ_k − δ_{k−1})².
    pub r_delta_rate: f64,
    /// Magnitude weights on (δ − δ_ref) and a_x.
    pub r_input: [f64; 2],
    /// Risk level for the e_y chance constraint.
    pub beta: f64,
    pub delta_bounds: (f64, f64),
    pub ax_bounds: (f64, f64),
    /// Use the erf (instead of erfinv) form of the tightening.
    pub printed_erf_variant: bool,
}

impl Default for TrackingMpcConfig {
    fn default() -> Self {
        Self {
            n_horizon: 20,
            period: 0.05,
            q: [5.0, 2.0, 2.0, 10.0, 20.0, 0.0],
            r_delta_rate: 20.0,
            r_input: [0.5, 0.05],
            beta: 0.6,
            delta_bounds: (-0.4, 0.4),
            ax_bounds: (-10.0, 5.0),
            printed_erf_variant: false,
        }
    }
}

/// Horizon reference: states for steps 1..N and a steering reference for each
/// input step 0..N-1.
#[derive(Debug, Clone)]
pub struct Reference {
    pub states: Vec<VehicleState>,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// Predicted states including the current one (length N+1).
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    /// Corridor tightening per predicted step 1..N.
    pub gammas: Vec<f64>,
    pub status: SolveStatus,
    pub(crate) qp_x: DVector<f64>,
    pub(crate) qp_duals: DVector<f64>,
}

fn nominal_trajectory(
    xi: &VehicleState,
    prev: Option<&OcpSolution>,
    track: &Track,
    params: &VehicleParams,
    cfg: &TrackingMpcConfig,
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
            // constant-velocity rollout with zero input
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

/// Solve the tracking OCP about the shifted previous solution and return the
/// first input. GP compensation enters as an additive mean on the (V_y, ψ̇)
/// rows of the linearized dynamics and as predictive variance feeding the e_y
/// corridor tightening. On solver failure the fallback is straight-line
/// braking.
pub fn mpc_step(
    xi: &VehicleState,
    reference: &Reference,
    gp: Option<&GpModel>,
    prev: Option<&OcpSolution>,
    last_delta: f64,
    track: &Track,
    params: &VehicleParams,
    cfg: &TrackingMpcConfig,
) -> (ControlInput, OcpSolution) {
    let n = cfg.n_horizon;
    assert!(reference.states.len() >= n && reference.deltas.len() >= n);
    let (bar_x, bar_u) = nominal_trajectory(xi, prev, track, params, cfg);

    // linearize along the nominal trajectory; evaluate GP at nominal features
    let mut lins = Vec::with_capacity(n);
    let mut mus = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    for k in 0..n {
        let lin = match linearize(&bar_x[k], &bar_u[k], params, track, cfg.period) {
            Ok(l) => l,
            Err(_) => {
                let sol = fallback_solution(xi, cfg, n);
                return (sol.inputs[0], sol);
            }
        };
        let (mu, var) = match gp {
            Some(m) => {
                let z = [bar_x[k].v_y, bar_x[k].psi_dot, bar_u[k].delta];
                let (mu, var) = m.predict(&z);
                ([mu[0], mu[1]], [var[0].max(0.0), var[1].max(0.0)])
            }
            None => ([0.0, 0.0], [0.0, 0.0]),
        };
        lins.push(lin);
        mus.push(mu);
        vars.push(var);
    }

    // chance-constraint tightening from propagated covariance
    let a_seq: Vec<[[f64; 6]; 6]> = lins.iter().map(|l| l.a).collect();
    let covs = propagate_covariance(&a_seq, &vars);
    let gammas: Vec<f64> = covs
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let sigma = c[(EY_ROW, EY_ROW)].max(0.0).sqrt();
            let g = tightening(sigma, cfg.beta, cfg.printed_erf_variant);
            // never tighten the corridor away entirely
            let (w_l, w_r) = track.width_at(bar_x[k + 1].s);
            g.min(0.45 * (w_l - w_r))
        })
        .collect();

    // QP variables: states x_1..x_N then inputs u_0..u_{N-1}
    let nv = 6 * n + 2 * n;
    let sx = |k: usize| (k - 1) * 6; // k in 1..=n
    let su = |k: usize| 6 * n + 2 * k; // k in 0..n

    let mut h = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    for k in 1..=n {
        let r = &reference.states[k - 1];
        let ra = r.to_array();
        for i in 0..6 {
            h[(sx(k) + i, sx(k) + i)] += 2.0 * cfg.q[i];
            g[sx(k) + i] += -2.0 * cfg.q[i] * ra[i];
        }
    }
    for k in 0..n {
        let di = su(k);
        h[(di, di)] += 2.0 * cfg.r_input[0];
        g[di] += -2.0 * cfg.r_input[0] * reference.deltas[k];
        h[(di + 1, di + 1)] += 2.0 * cfg.r_input[1];
        // steering-rate chain
        h[(di, di)] += 2.0 * cfg.r_delta_rate;
        if k == 0 {
            g[di] += -2.0 * cfg.r_delta_rate * last_delta;
        } else {
            let dp = su(k - 1);
            h[(dp, dp)] += 2.0 * cfg.r_delta_rate;
            h[(di, dp)] += -2.0 * cfg.r_delta_rate;
            h[(dp, di)] += -2.0 * cfg.r_delta_rate;
        }
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
            if i == VY_ROW {
                rhs += mus[k][0];
            }
            if i == PSIDOT_ROW {
                rhs += mus[k][1];
            }
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

    // tightened e_y corridor
    let mut a_in = DMatrix::zeros(n, nv);
    let mut lo = DVector::zeros(n);
    let mut up = DVector::zeros(n);
    for k in 1..=n {
        a_in[(k - 1, sx(k) + EY_ROW)] = 1.0;
        let (w_l, w_r) = track.width_at(bar_x[k].s);
        lo[k - 1] = w_r + gammas[k - 1];
        up[k - 1] = w_l - gammas[k - 1];
    }
    qp.add_inequalities(a_in, lo, up);

    // input box
    let mut lo_u = Vec::with_capacity(2 * n);
    let mut up_u = Vec::with_capacity(2 * n);
    for _ in 0..n {
        lo_u.push(cfg.delta_bounds.0);
        up_u.push(cfg.delta_bounds.1);
        lo_u.push(cfg.ax_bounds.0);
        up_u.push(cfg.ax_bounds.1);
    }
    // the box rows must interleave to match variable order (δ, a_x) per step
    let mut a_box = DMatrix::zeros(2 * n, nv);
    for k in 0..n {
        a_box[(2 * k, su(k))] = 1.0;
        a_box[(2 * k + 1, su(k) + 1)] = 1.0;
    }
    qp.add_inequalities(a_box, DVector::from_vec(lo_u), DVector::from_vec(up_u));

    let warm = prev.and_then(|p| {
        (p.qp_x.len() == nv && p.qp_duals.len() == 9 * n).then_some((&p.qp_x, &p.qp_duals))
    });
    let sol = solve_qp_warm(&qp, &QpSettings::default(), warm);

    if sol.status == SolveStatus::Infeasible {
        let fb = fallback_solution(xi, cfg, n);
        return (fb.inputs[0], fb);
    }

    let mut states = Vec::with_capacity(n + 1);
    states.push(*xi);
    for k in 1..=n {
        let mut arr = [0.0; 6];
        for i in 0..6 {
            arr[i] = sol.x[sx(k) + i];
        }
        states.push(VehicleState::from_array(arr));
    }
    let mut inputs = Vec::with_capacity(n);
    for k in 0..n {
        inputs.push(ControlInput { delta: sol.x[su(k)], a_x: sol.x[su(k) + 1] });
    }
    let u0 = inputs[0];
    (
        u0,
        OcpSolution {
            states,
            inputs,
            gammas,
            status: sol.status,
            qp_x: sol.x,
            qp_duals: sol.duals,
        },
    )
}

fn fallback_solution(xi: &VehicleState, cfg: &TrackingMpcConfig, n: usize) -> OcpSolution {
    let u = ControlInput { delta: 0.0, a_x: cfg.ax_bounds.0 };
    OcpSolution {
        states: vec![*xi; n + 1],
        inputs: vec![u; n],
        gammas: vec![0.0; n],
        status: SolveStatus::Infeasible,
        qp_x: DVector::zeros(0),
        qp_duals: DVector::zeros(0),
    }
}

// ---------------------------------------------------------------------------
// spatial-domain minimum-time planner
// ---------------------------------------------------------------------------

/// Closed planned trajectory on a uniform spatial grid: `states[k]` and
/// `inputs[k]` at s = k·Δs for k = 0..N_p−1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannedTrajectory {
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    pub lap_time: f64,
}

impl PlannedTrajectory {
    pub fn n_points(&self) -> usize {
        self.states.len()
    }

    /// Linear interpolation at path position s (wrapped on closed tracks).
    pub fn sample(&self, s: f64, track: &Track) -> (VehicleState, ControlInput) {
        let n = self.states.len();
        let ds = track.total_length() / n as f64;
        let sw = track.wrap_s(s);
        let pos = sw / ds;
        let k = (pos.floor() as usize).min(n - 1);
        let frac = pos - k as f64;
        let k2 = if track.closed { (k + 1) % n } else { (k + 1).min(n - 1) };
        let a = self.states[k].to_array();
        let b = self.states[k2].to_array();
        let mut out = [0.0; 6];
        for i in 0..5 {
            out[i] = a[i] * (1.0 - frac) + b[i] * frac;
        }
        out[5] = s;
        (VehicleState::from_array(out), self.inputs[k])
    }
}

/// Predicted lap time of a trajectory on its spatial grid:
/// Σ (1 − κ e_y) Δs / (V_x cos e_ψ − V_y sin e_ψ).
pub fn lap_time_of(traj: &PlannedTrajectory, track: &Track) -> f64 {
    let n = traj.states.len();
    let ds = track.total_length() / n as f64;
    traj.states
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let kappa = track.curvature_at(k as f64 * ds);
            let sdot = (x.v_x * x.e_psi.cos() - x.v_y * x.e_psi.sin()) / (1.0 - kappa * x.e_y);
            ds / sdot.max(0.1)
        })
        .sum()
}

/// Centerline initial plan with a curvature-limited speed profile
/// V = min(V_max, √(a_lat,max / |κ|)), smoothed by a forward/backward pass
/// respecting the longitudinal acceleration bounds.
pub fn initial_plan(
    track: &Track,
    n_p: usize,
    v_max: f64,
    a_lat_max: f64,
    ax_bounds: (f64, f64),
    params: &VehicleParams,
) -> PlannedTrajectory {
    let l = track.total_length();
    let ds = l / n_p as f64;
    let mut v: Vec<f64> = (0..n_p)
        .map(|k| {
            let kappa = track.curvature_at(k as f64 * ds).abs();
            if kappa > 1e-9 { v_max.min((a_lat_max / kappa).sqrt()) } else { v_max }
        })
        .collect();
    // forward (acceleration) and backward (braking) limiting, two wraps each
    for _ in 0..2 {
        for k in 0..n_p {
            let nk = (k + 1) % n_p;
            let cap = (v[k] * v[k] + 2.0 * ax_bounds.1 * ds).max(0.0).sqrt();
            v[nk] = v[nk].min(cap);
        }
        for k in (0..n_p).rev() {
            let nk = (k + 1) % n_p;
            let cap = (v[nk] * v[nk] - 2.0 * ax_bounds.0 * ds).max(0.0).sqrt();
            v[k] = v[k].min(cap);
        }
    }
    let mut states = Vec::with_capacity(n_p);
    let mut inputs = Vec::with_capacity(n_p);
    let wheelbase = params.l_f + params.l_r;
    for k in 0..n_p {
        let s = k as f64 * ds;
        let kappa = track.curvature_at(s);
        // steady-state cornering at this curvature: lateral and yaw balance
        // give the axle forces, hence slip angles, hence V_y and δ
        let psi_dot = kappa * v[k];
        let f_lat = params.m * v[k] * psi_dot;
        let alpha_f = f_lat * params.l_r / wheelbase / params.c_alpha_f;
        let alpha_r = f_lat * params.l_f / wheelbase / params.c_alpha_r;
        let v_y = params.l_r * psi_dot - v[k] * alpha_r.tan();
        let delta = alpha_f + ((v_y + params.l_f * psi_dot) / v[k]).atan();
        states.push(VehicleState { v_x: v[k], v_y, psi_dot, e_psi: 0.0, e_y: 0.0, s });
        let v_next = v[(k + 1) % n_p];
        inputs.push(ControlInput {
            delta,
            a_x: (v_next * v_next - v[k] * v[k]) / (2.0 * ds),
        });
    }
    let mut traj = PlannedTrajectory { states, inputs, lap_time: 0.0 };
    traj.lap_time = lap_time_of(&traj, track);
    traj
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerSettings {
    pub n_points: usize,
    /// Outer SQP iterations; the per-iteration protocol uses 1.
    pub max_outer: usize,
    pub trust_state: f64,
    pub trust_input: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Margin kept to the physical track edges, m.
    pub edge_margin: f64,
    pub delta_bounds: (f64, f64),
    pub ax_bounds: (f64, f64),
    pub reg_state: f64,
    pub reg_input: f64,
    pub rate_input: f64,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            n_points: 100,
            max_outer: 1,
            trust_state: 0.6,
            trust_input: 0.15,
            v_min: 1.0,
            v_max: 30.0,
            edge_margin: 0.1,
            delta_bounds: (-0.4, 0.4),
            ax_bounds: (-10.0, 5.0),
            reg_state: 1e-3,
            reg_input: 5e-2,
            rate_input: 5e-1,
        }
    }
}

/// The planner state per node is [V_x, V_y, ψ̇, e_ψ, e_y]; s is the
/// independent variable on a uniform grid.
const PSTATE: usize = 5;

struct PlannerModel<'a> {
    track: &'a Track,
    params: &'a VehicleParams,
    gp: Option<&'a GpModel>,
    warm: &'a PlannedTrajectory,
    settings: &'a PlannerSettings,
}

impl PlannerModel<'_> {
    fn n_p(&self) -> usize {
        self.settings.n_points
    }

    fn ds(&self) -> f64 {
        self.track.total_length() / self.n_p() as f64
    }

    /// Spatial derivative dξ/ds of the 5 planner states, with the GP
    /// derivative compensation (evaluated at warm-start features) already
    /// added on the V̇_y and ψ̈ rows.
    fn f_spatial(&self, x5: &[f64; PSTATE], u: &ControlInput, k: usize) -> [f64; PSTATE] {
        let s = k as f64 * self.ds();
        let xi = VehicleState {
            v_x: x5[0].max(0.3),
            v_y: x5[1],
            psi_dot: x5[2],
            e_psi: x5[3],
            e_y: x5[4],
            s,
        };
        let mut f = continuous_dynamics(&xi, u, self.params, self.track, TireLaw::Linear)
            .unwrap_or([0.0; 6]);
        if let Some(m) = self.gp {
            let w = &self.warm.states[k];
            let mu = m.predict_mean(&[w.v_y, w.psi_dot, self.warm.inputs[k].delta]);
            f[VY_ROW] += mu[0];
            f[PSIDOT_ROW] += mu[1];
        }
        let sdot = f[5].max(0.1);
        let mut out = [0.0; PSTATE];
        for i in 0..PSTATE {
            out[i] = f[i] / sdot;
        }
        out
    }

    /// Time spent on the cell starting at node k.
    fn cell_time(&self, x5: &[f64; PSTATE], k: usize) -> f64 {
        let s = k as f64 * self.ds();
        let kappa = self.track.curvature_at(s);
        let sdot = (x5[0] * x5[3].cos() - x5[1] * x5[3].sin()) / (1.0 - kappa * x5[4]);
        self.ds() / sdot.max(0.1)
    }
}

impl SqpModel for PlannerModel<'_> {
    fn dim(&self) -> usize {
        (PSTATE + 2) * self.n_p()
    }

    fn quadratize(&self, x: &[f64]) -> QpProblem {
        let n_p = self.n_p();
        let ds = self.ds();
        let sx = |k: usize| k * PSTATE;
        let su = |k: usize| PSTATE * n_p + 2 * k;

        let get_state = |k: usize| -> [f64; PSTATE] {
            let mut out = [0.0; PSTATE];
            out.copy_from_slice(&x[sx(k)..sx(k) + PSTATE]);
            out
        };
        let get_input = |k: usize| ControlInput { delta: x[su(k)], a_x: x[su(k) + 1] };

        let nv = self.dim();
        let mut h = DMatrix::zeros(nv, nv);
        let mut g = DVector::zeros(nv);

        // lap-time cost, quadratized per node by finite differences
        for k in 0..n_p {
            let xs = get_state(k);
            let hstep = 1e-4;
            let mut grad = [0.0; PSTATE];
            let mut hess = DMatrix::zeros(PSTATE, PSTATE);
            for i in 0..PSTATE {
                let mut xp = xs;
                let mut xm = xs;
                xp[i] += hstep;
                xm[i] -= hstep;
                grad[i] = (self.cell_time(&xp, k) - self.cell_time(&xm, k)) / (2.0 * hstep);
                for j in i..PSTATE {
                    let mut xpp = xs;
                    let mut xpm = xs;
                    let mut xmp = xs;
                    let mut xmm = xs;
                    xpp[i] += hstep;
                    xpp[j] += hstep;
                    xpm[i] += hstep;
                    xpm[j] -= hstep;
                    xmp[i] -= hstep;
                    xmp[j] += hstep;
                    xmm[i] -= hstep;
                    xmm[j] -= hstep;
                    let v = (self.cell_time(&xpp, k) - self.cell_time(&xpm, k)
                        - self.cell_time(&xmp, k)
                        + self.cell_time(&xmm, k))
                        / (4.0 * hstep * hstep);
                    hess[(i, j)] = v;
                    hess[(j, i)] = v;
                }
            }
            // PSD clamp of the cell Hessian
            let eig = nalgebra::SymmetricEigen::new(hess.clone());
            let mut clamped = DMatrix::zeros(PSTATE, PSTATE);
            for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
                let lam = lam.max(1e-6);
                let v = eig.eigenvectors.column(idx);
                clamped += lam * &v * v.transpose();
            }
            for i in 0..PSTATE {
                g[sx(k) + i] += grad[i];
                for j in 0..PSTATE {
                    h[(sx(k) + i, sx(k) + j)] += clamped[(i, j)];
                }
            }
        }

        // regularization and input-rate smoothing (quadratic in the step)
        for k in 0..n_p {
            for i in 0..PSTATE {
                h[(sx(k) + i, sx(k) + i)] += 2.0 * self.settings.reg_state;
            }
            for i in 0..2 {
                h[(su(k) + i, su(k) + i)] += 2.0 * self.settings.reg_input;
            }
            let kp = (k + n_p - 1) % n_p;
            if !self.track.closed && k == 0 {
                continue;
            }
            let cur = get_input(k);
            let prev = get_input(kp);
            let rate = [cur.delta - prev.delta, cur.a_x - prev.a_x];
            for i in 0..2 {
                let a = su(k) + i;
                let b = su(kp) + i;
                h[(a, a)] += 2.0 * self.settings.rate_input;
                h[(b, b)] += 2.0 * self.settings.rate_input;
                h[(a, b)] += -2.0 * self.settings.rate_input;
                h[(b, a)] += -2.0 * self.settings.rate_input;
                g[a] += 2.0 * self.settings.rate_input * rate[i];
                g[b] += -2.0 * self.settings.rate_input * rate[i];
            }
        }

        let mut qp = QpProblem::new(h, g);

        // dynamics defects: d_{k+1} − (I + Δs J_x) d_k − Δs J_u d_u = r_k
        let closed = self.track.closed;
        let n_dyn = if closed { n_p } else { n_p - 1 };
        let mut a_eq = DMatrix::zeros(PSTATE * n_dyn + if closed { 0 } else { PSTATE }, nv);
        let mut b_eq = DVector::zeros(a_eq.nrows());
        for k in 0..n_dyn {
            let kn = (k + 1) % n_p;
            let xs = get_state(k);
            let us = get_input(k);
            let f0 = self.f_spatial(&xs, &us, k);
            let row0 = PSTATE * k;
            // state Jacobian by central differences
            for j in 0..PSTATE {
                let hstep = 1e-6 * (1.0 + xs[j].abs());
                let mut xp = xs;
                let mut xm = xs;
                xp[j] += hstep;
                xm[j] -= hstep;
                let fp = self.f_spatial(&xp, &us, k);
                let fm = self.f_spatial(&xm, &us, k);
                for i in 0..PSTATE {
                    let jac = (fp[i] - fm[i]) / (2.0 * hstep);
                    let coef = -(if i == j { 1.0 } else { 0.0 }) - ds * jac;
                    a_eq[(row0 + i, sx(k) + j)] = coef;
                }
            }
            for j in 0..2 {
                let hstep = 1e-6;
                let mut up = us;
                let mut um = us;
                if j == 0 {
                    up.delta += hstep;
                    um.delta -= hstep;
                } else {
                    up.a_x += hstep;
                    um.a_x -= hstep;
                }
                let fp = self.f_spatial(&xs, &up, k);
                let fm = self.f_spatial(&xs, &um, k);
                for i in 0..PSTATE {
                    a_eq[(row0 + i, su(k) + j)] = -ds * (fp[i] - fm[i]) / (2.0 * hstep);
                }
            }
            let xn = get_state(kn);
            for i in 0..PSTATE {
                a_eq[(row0 + i, sx(kn) + i)] += 1.0;
                b_eq[row0 + i] = xs[i] + ds * f0[i] - xn[i];
            }
        }
        if !closed {
            // pin the first node
            let row0 = PSTATE * n_dyn;
            for i in 0..PSTATE {
                a_eq[(row0 + i, sx(0) + i)] = 1.0;
                b_eq[row0 + i] = 0.0;
            }
        }
        qp.add_equalities(a_eq, b_eq);

        // bounds on V_x, e_y, δ, a_x translated to the step variables
        let n_rows = 2 * n_p + 2 * n_p;
        let mut a_in = DMatrix::zeros(n_rows, nv);
        let mut lo = DVector::zeros(n_rows);
        let mut up = DVector::zeros(n_rows);
        for k in 0..n_p {
            let xs = get_state(k);
            let us = get_input(k);
            let s = k as f64 * ds;
            let (w_l, w_r) = self.track.width_at(s);
            let r = 4 * k;
            a_in[(r, sx(k))] = 1.0;
            lo[r] = self.settings.v_min - xs[0];
            up[r] = self.settings.v_max - xs[0];
            a_in[(r + 1, sx(k) + 4)] = 1.0;
            lo[r + 1] = (w_r + self.settings.edge_margin) - xs[4];
            up[r + 1] = (w_l - self.settings.edge_margin) - xs[4];
            a_in[(r + 2, su(k))] = 1.0;
            lo[r + 2] = self.settings.delta_bounds.0 - us.delta;
            up[r + 2] = self.settings.delta_bounds.1 - us.delta;
            a_in[(r + 3, su(k) + 1)] = 1.0;
            lo[r + 3] = self.settings.ax_bounds.0 - us.a_x;
            up[r + 3] = self.settings.ax_bounds.1 - us.a_x;
        }
        qp.add_inequalities(a_in, lo, up);
        qp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStatus {
    Updated,
    Degraded,
}

/// One (or `max_outer`) SQP passes over the spatial minimum-time problem,
/// warm-started from the previous plan. Returns the improved trajectory; on
/// solver failure the warm start is returned unchanged with Degraded status.
pub fn plan_min_time(
    track: &Track,
    gp_plan: Option<&GpModel>,
    warm: &PlannedTrajectory,
    params: &VehicleParams,
    settings: &PlannerSettings,
) -> (PlannedTrajectory, PlanStatus) {
    let n_p = settings.n_points;
    assert_eq!(warm.states.len(), n_p, "warm start resolution mismatch");
    let model = PlannerModel { track, params, gp: gp_plan, warm, settings };

    let mut x0 = vec![0.0; model.dim()];
    for k in 0..n_p {
        let a = warm.states[k].to_array();
        x0[k * PSTATE..(k + 1) * PSTATE].copy_from_slice(&a[..PSTATE]);
        x0[PSTATE * n_p + 2 * k] = warm.inputs[k].delta;
        x0[PSTATE * n_p + 2 * k + 1] = warm.inputs[k].a_x;
    }
    // a coarse warm start can make the trust-regioned QP infeasible; retry
    // with a widened region before giving up (deterministic)
    let mut res = None;
    for attempt in 0..3 {
        let scale = (1 << attempt) as f64;
        let mut trust = vec![settings.trust_state * scale; PSTATE * n_p];
        trust.extend(vec![settings.trust_input * scale; 2 * n_p]);
        let sqp = SqpSettings {
            max_outer: settings.max_outer,
            trust_region: trust,
            step_tol: 1e-8,
            qp: QpSettings::default(),
        };
        let r = crate::solver::sqp_solve(&model, &x0, &sqp);
        if !(r.status == SqpStatus::Degraded && r.iterations == 0) {
            res = Some(r);
            break;
        }
    }
    let Some(res) = res else {
        return (warm.clone(), PlanStatus::Degraded);
    };
    let ds = track.total_length() / n_p as f64;
    let mut states = Vec::with_capacity(n_p);
    let mut inputs = Vec::with_capacity(n_p);
    for k in 0..n_p {
        let xs = &res.x[k * PSTATE..(k + 1) * PSTATE];
        states.push(VehicleState {
            v_x: xs[0],
            v_y: xs[1],
            psi_dot: xs[2],
            e_psi: xs[3],
            e_y: xs[4],
            s: k as f64 * ds,
        });
        inputs.push(ControlInput {
            delta: res.x[PSTATE * n_p + 2 * k],
            a_x: res.x[PSTATE * n_p + 2 * k + 1],
        });
    }
    let mut traj = PlannedTrajectory { states, inputs, lap_time: 0.0 };
    traj.lap_time = lap_time_of(&traj, track);
    (traj, PlanStatus::Updated)
}

// ---------------------------------------------------------------------------
// iteration loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeTrialConfig {
    pub mpc: TrackingMpcConfig,
    pub planner: PlannerSettings,
    pub exploration: ExplorationConfig,
    pub selection: SelectionPolicy,
    /// Initial observation-noise variances for the (V_y, ψ̇) outputs of the
    /// tracking GP; the planning GP scales them by 1/T².
    pub noise_mpc: [f64; 2],
    pub hyperopt: OptimizeSettings,
    pub hyperopt_enabled: bool,
    /// Curvature-limited speed-profile parameters for the initial plan.
    pub a_lat_max: f64,
    /// Wall-clock cap per lap, s.
    pub max_lap_time: f64,
    pub plant: PlantConfig,
}

impl Default for TimeTrialConfig {
    fn default() -> Self {
        let mut exploration = ExplorationConfig::default();
        exploration.output_weights = vec![2.0, 2.0];
        Self {
            mpc: TrackingMpcConfig::default(),
            planner: PlannerSettings::default(),
            exploration,
            selection: SelectionPolicy { capacity: 150, outlier_multiplier: 3.0 },
            noise_mpc: [1e-5, 1e-5],
            hyperopt: OptimizeSettings { restarts: 1, max_iters: 40, initial_step: 0.1 },
            hyperopt_enabled: true,
            a_lat_max: 8.0,
            max_lap_time: 120.0,
            plant: PlantConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub t: f64,
    pub state: VehicleState,
    pub input: ControlInput,
    pub z_ref: [f64; 3],
    pub gamma_1: f64,
    pub qp_optimal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub alpha: f64,
    pub lap_time_planned: f64,
    pub lap_time_measured: f64,
    pub aborted: bool,
    pub dataset_mpc_len: usize,
    pub dataset_plan_len: usize,
    pub steps: Vec<StepLog>,
}

pub struct TimeTrialSession {
    pub track: Track,
    pub params: VehicleParams,
    pub config: TimeTrialConfig,
    pub seed: u64,
    pub iteration: usize,
    pub dataset_mpc: GpDataset,
    pub dataset_plan: GpDataset,
    pub model_mpc: Option<GpModel>,
    pub model_plan: Option<GpModel>,
    pub plan: PlannedTrajectory,
    pub feature_history: Vec<Vec<f64>>,
}

impl TimeTrialSession {
    pub fn new(track: Track, params: VehicleParams, config: TimeTrialConfig, seed: u64) -> Self {
        let plan = initial_plan(
            &track,
            config.planner.n_points,
            config.planner.v_max,
            config.a_lat_max,
            config.planner.ax_bounds,
            &params,
        );
        let cap = config.selection.capacity;
        Self {
            track,
            params,
            config,
            seed,
            iteration: 0,
            dataset_mpc: GpDataset::new(cap),
            dataset_plan: GpDataset::new(cap),
            model_mpc: None,
            model_plan: None,
            plan,
            feature_history: Vec::new(),
        }
    }

    /// Horizon reference sampled from the plan, advancing s with the planned
    /// speed.
    fn horizon_reference(&self, xi: &VehicleState) -> Reference {
        let n = self.config.mpc.n_horizon;
        let t = self.config.mpc.period;
        let mut states = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        let mut s = xi.s;
        for _ in 0..n {
            let (st, u) = self.plan.sample(s, &self.track);
            let kappa = self.track.curvature_at(s);
            let sdot =
                (st.v_x * st.e_psi.cos() - st.v_y * st.e_psi.sin()) / (1.0 - kappa * st.e_y);
            s += t * sdot.max(0.5);
            let (st_next, _) = self.plan.sample(s, &self.track);
            states.push(st_next);
            deltas.push(u.delta);
        }
        Reference { states, deltas }
    }

    /// Simulate one full lap under the current plan and models, feed the
    /// residuals through the selection policy, then refit both GPs.
    pub fn run_iteration(&mut self) -> IterationLog {
        let j = self.iteration;
        let alpha = self.config.exploration.alpha_for_iteration(j);

        if j >= 1 {
            let (plan, _) = plan_min_time(
                &self.track,
                self.model_plan.as_ref(),
                &self.plan,
                &self.params,
                &self.config.planner,
            );
            self.plan = plan;
        }

        // exploration grid for this iteration
        let grid = match (&self.model_mpc, self.feature_history.is_empty()) {
            (Some(m), false) => {
                let mut g = build_grid(
                    &self.feature_history,
                    &self.config.exploration,
                    self.seed ^ (j as u64).wrapping_mul(0x9e37_79b9),
                )
                .ok();
                if let Some(gr) = g.as_mut() {
                    precompute_variances(m, gr, &self.config.exploration.output_weights);
                }
                g
            }
            _ => None,
        };

        let t_step = self.config.mpc.period;
        let l = self.track.total_length();
        let mut xi = self.plan.states[0];
        xi.s = 0.0;
        let mut prev: Option<OcpSolution> = None;
        let mut last_delta = 0.0;
        let mut t = 0.0;
        let mut progress = 0.0;
        let mut lap_time_measured = f64::NAN;
        let mut aborted = false;
        let mut steps = Vec::new();

        while t < self.config.max_lap_time {
            let mut reference = self.horizon_reference(&xi);
            let mut z_ref = [
                reference.states[0].v_y,
                reference.states[0].psi_dot,
                reference.deltas[0],
            ];
            if let Some(gr) = &grid {
                if alpha > 0.0 {
                    let (zr, _) = select_target(&z_ref, gr, alpha, false);
                    z_ref = [zr[0], zr[1], zr[2]];
                    for st in &mut reference.states {
                        st.v_y = zr[0];
                        st.psi_dot = zr[1];
                    }
                    for d in &mut reference.deltas {
                        *d = zr[2];
                    }
                }
            }

            let (u0, sol) = mpc_step(
                &xi,
                &reference,
                self.model_mpc.as_ref(),
                prev.as_ref(),
                last_delta,
                &self.track,
                &self.params,
                &self.config.mpc,
            );
            let next = match plant_step(&xi, &u0, &self.params, &self.config.plant, &self.track, t_step)
            {
                Ok(n) => n,
                Err(_) => {
                    aborted = true;
                    break;
                }
            };

            let sample = measure_residuals(&xi, &u0, &next, &self.track, &self.params, t_step);
            self.feature_history.push(sample.z.to_vec());
            self.store_sample(&sample);

            steps.push(StepLog {
                t,
                state: xi,
                input: u0,
                z_ref,
                gamma_1: sol.gammas.first().copied().unwrap_or(0.0),
                qp_optimal: sol.status == SolveStatus::Optimal,
            });

            // lap progress with wrap-aware increments
            let mut ds = next.s - xi.s;
            if self.track.closed {
                if ds < -l * 0.5 {
                    ds += l;
                } else if ds > l * 0.5 {
                    ds -= l;
                }
            }
            let new_progress = progress + ds;
            if new_progress >= l && ds > 0.0 {
                lap_time_measured = t + t_step * (l - progress) / ds;
            }

            let (w_l, w_r) = self.track.width_at(next.s);
            if next.e_y > w_l + 1.0 || next.e_y < w_r - 1.0 {
                aborted = true;
                break;
            }

            progress = new_progress;
            prev = Some(sol);
            last_delta = u0.delta;
            xi = next;
            t += t_step;
            if !lap_time_measured.is_nan() {
                break;
            }
        }
        if lap_time_measured.is_nan() {
            aborted = true;
            lap_time_measured = self.config.max_lap_time;
        }

        self.refit();
        self.iteration += 1;
        IterationLog {
            iteration: j,
            alpha,
            lap_time_planned: self.plan.lap_time,
            lap_time_measured,
            aborted,
            dataset_mpc_len: self.dataset_mpc.len(),
            dataset_plan_len: self.dataset_plan.len(),
            steps,
        }
    }

    fn store_sample(&mut self, sample: &ResidualSample) {
        let obs_mpc = Observation::new(sample.z.to_vec(), sample.y_mpc.to_vec());
        let obs_plan = Observation::new(sample.z.to_vec(), sample.y_plan.to_vec());
        match &self.model_mpc {
            Some(m) => {
                consider(&mut self.dataset_mpc, m, obs_mpc, &self.config.selection);
            }
            None => {
                if !self.dataset_mpc.is_full() {
                    self.dataset_mpc.push(obs_mpc);
                }
            }
        }
        match &self.model_plan {
            Some(m) => {
                consider(&mut self.dataset_plan, m, obs_plan, &self.config.selection);
            }
            None => {
                if !self.dataset_plan.is_full() {
                    self.dataset_plan.push(obs_plan);
                }
            }
        }
    }

    fn refit(&mut self) {
        let t = self.config.mpc.period;
        let noise_plan = [self.config.noise_mpc[0] / (t * t), self.config.noise_mpc[1] / (t * t)];
        self.model_mpc = self.fit_one(&self.dataset_mpc.clone(), self.config.noise_mpc, 1);
        self.model_plan = self.fit_one(&self.dataset_plan.clone(), noise_plan, 2);
    }

    fn fit_one(&self, dataset: &GpDataset, noise: [f64; 2], salt: u64) -> Option<GpModel> {
        if dataset.len() < 5 {
            return None;
        }
        if self.config.hyperopt_enabled {
            if let Ok(hp) = optimize_hyperparameters(
                dataset,
                crate::gp::KernelFamily::SquaredExponential,
                &noise,
                &self.config.hyperopt,
                self.seed ^ salt,
            ) {
                if let Ok(m) = fit(dataset, &hp.kernel, &hp.noise) {
                    return Some(m);
                }
            }
        }
        let kernel = KernelSpec::squared_exponential(0.1, vec![0.5, 0.5, 0.1]);
        fit(dataset, &kernel, &noise).ok()
    }
}
