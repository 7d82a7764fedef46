//! Dynamic bicycle model in Frenet coordinates, its linearization, and the
//! higher-fidelity plant surrogate that generates the model mismatch the GPs
//! learn.
//!
//! The nominal model uses linear tires; the plant integrates the same
//! equations with Pacejka tires, perturbed mass and inertia, and substepping.

use crate::track::Track;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Velocity floor in the slip-angle computation, m/s.
const SLIP_EPS: f64 = 0.5;
/// Singularity guard on 1 - kappa*e_y.
const FRENET_GUARD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("near-singular Frenet projection: 1 - kappa*e_y = {0}")]
    NearSingularFrenet(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub v_x: f64,
    pub v_y: f64,
    pub psi_dot: f64,
    pub e_psi: f64,
    pub e_y: f64,
    pub s: f64,
}

impl VehicleState {
    pub fn zero() -> Self {
        Self { v_x: 0.0, v_y: 0.0, psi_dot: 0.0, e_psi: 0.0, e_y: 0.0, s: 0.0 }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.v_x, self.v_y, self.psi_dot, self.e_psi, self.e_y, self.s]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { v_x: a[0], v_y: a[1], psi_dot: a[2], e_psi: a[3], e_y: a[4], s: a[5] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Front steering angle, rad.
    pub delta: f64,
    /// Powertrain longitudinal acceleration, m/s^2.
    pub a_x: f64,
}

impl ControlInput {
    pub fn zero() -> Self {
        Self { delta: 0.0, a_x: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TireLaw {
    Linear,
    Pacejka,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Axle {
    Front,
    Rear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacejkaParams {
    pub b: f64,
    pub c: f64,
    /// Peak multiplier on mu * normal_load.
    pub d_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub m: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub i_zz: f64,
    pub h_c: f64,
    pub mu: f64,
    pub c_xw: f64,
    pub c_r: f64,
    pub g: f64,
    /// Front/rear linear cornering stiffness, N/rad (nominal tires).
    pub c_alpha_f: f64,
    pub c_alpha_r: f64,
    pub pacejka_front: PacejkaParams,
    pub pacejka_rear: PacejkaParams,
}

impl VehicleParams {
    /// Audi TT Cup parameters with a linear stiffness matched to the Pacejka
    /// small-slip slope, so the nominal model is accurate away from the
    /// handling limits and degrades as the tires saturate.
    pub fn audi_tt_cup() -> Self {
        let m = 1161.25;
        let l_f = 1.0234;
        let l_r = 1.4826;
        let mu = 1.5;
        let g = 9.81;
        let pacejka = PacejkaParams { b: 8.0, c: 1.5, d_scale: 1.0 };
        let f_zf = m * g * l_r / (l_f + l_r);
        let f_zr = m * g * l_f / (l_f + l_r);
        Self {
            m,
            l_f,
            l_r,
            i_zz: 2106.9543,
            h_c: 0.5136,
            mu,
            c_xw: 0.1412,
            c_r: 0.015,
            g,
            c_alpha_f: mu * f_zf * pacejka.b * pacejka.c,
            c_alpha_r: mu * f_zr * pacejka.b * pacejka.c,
            pacejka_front: pacejka,
            pacejka_rear: pacejka,
        }
    }

    pub fn front_load(&self) -> f64 {
        self.m * self.g * self.l_r / (self.l_f + self.l_r)
    }

    pub fn rear_load(&self) -> f64 {
        self.m * self.g * self.l_f / (self.l_f + self.l_r)
    }
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self::audi_tt_cup()
    }
}

pub fn tire_force(axle: Axle, slip_angle: f64, normal_load: f64, p: &VehicleParams, law: TireLaw) -> f64 {
    match law {
        TireLaw::Linear => {
            let c = match axle {
                Axle::Front => p.c_alpha_f,
                Axle::Rear => p.c_alpha_r,
            };
            c * slip_angle
        }
        TireLaw::Pacejka => {
            let pj = match axle {
                Axle::Front => p.pacejka_front,
                Axle::Rear => p.pacejka_rear,
            };
            let d = p.mu * normal_load * pj.d_scale;
            d * (pj.c * (pj.b * slip_angle).atan()).sin()
        }
    }
}

fn slip_angles(xi: &VehicleState, u: &ControlInput, p: &VehicleParams) -> (f64, f64) {
    let v = xi.v_x.max(SLIP_EPS);
    let alpha_f = u.delta - (xi.v_y + p.l_f * xi.psi_dot).atan2(v);
    let alpha_r = -(xi.v_y - p.l_r * xi.psi_dot).atan2(v);
    (alpha_f, alpha_r)
}

/// The six rows of the Frenet bicycle model, d(xi)/dt.
pub fn continuous_dynamics(
    xi: &VehicleState,
    u: &ControlInput,
    p: &VehicleParams,
    track: &Track,
    law: TireLaw,
) -> Result<[f64; 6], VehicleError> {
    let kappa = track.curvature_at(xi.s);
    let denom = 1.0 - kappa * xi.e_y;
    if denom <= FRENET_GUARD {
        return Err(VehicleError::NearSingularFrenet(denom));
    }
    let phi = track.incline_at(xi.s);
    let (alpha_f, alpha_r) = slip_angles(xi, u, p);
    let f_yf = tire_force(Axle::Front, alpha_f, p.front_load(), p, law);
    let f_yr = tire_force(Axle::Rear, alpha_r, p.rear_load(), p, law);
    let r_x = p.c_r * p.m * p.g * xi.v_x.signum();
    let f_xw = p.c_xw * xi.v_x * xi.v_x;
    let q = (xi.v_x * xi.e_psi.cos() - xi.v_y * xi.e_psi.sin()) / denom;
    Ok([
        u.a_x - (f_yf * u.delta.sin() + r_x + f_xw) / p.m - p.g * phi.sin() + xi.psi_dot * xi.v_y,
        (f_yf * u.delta.cos() + f_yr) / p.m - xi.psi_dot * xi.v_x,
        (p.l_f * f_yf * u.delta.cos() - p.l_r * f_yr) / p.i_zz,
        xi.psi_dot - q * kappa,
        xi.v_x * xi.e_psi.sin() + xi.v_y * xi.e_psi.cos(),
        q,
    ])
}

/// One forward-Euler step without angle/arc-length wrapping.
pub fn euler_step_raw(
    xi: &VehicleState,
    u: &ControlInput,
    p: &VehicleParams,
    track: &Track,
    t: f64,
    law: TireLaw,
) -> Result<VehicleState, VehicleError> {
    let f = continuous_dynamics(xi, u, p, track, law)?;
    let a = xi.to_array();
    let mut out = [0.0; 6];
    for i in 0..6 {
        out[i] = a[i] + f[i] * t;
    }
    Ok(VehicleState::from_array(out))
}

/// Forward-Euler step with e_psi wrapped to (-pi, pi] and s wrapped on closed tracks.
pub fn euler_step(
    xi: &VehicleState,
    u: &ControlInput,
    p: &VehicleParams,
    track: &Track,
    t: f64,
    law: TireLaw,
) -> Result<VehicleState, VehicleError> {
    let mut next = euler_step_raw(xi, u, p, track, t, law)?;
    next.e_psi = crate::track::wrap_angle(next.e_psi);
    if track.closed {
        next.s = next.s.rem_euclid(track.total_length());
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub mass_scale: f64,
    pub inertia_scale: f64,
    pub tire: TireLaw,
    pub substeps: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self { mass_scale: 1.08, inertia_scale: 0.92, tire: TireLaw::Pacejka, substeps: 10 }
    }
}

/// High-fidelity surrogate: Pacejka tires, perturbed mass/inertia, substepped
/// Euler integration. Deterministic.
pub fn plant_step(
    xi: &VehicleState,
    u: &ControlInput,
    p: &VehicleParams,
    cfg: &PlantConfig,
    track: &Track,
    t: f64,
) -> Result<VehicleState, VehicleError> {
    let mut pp = p.clone();
    pp.m *= cfg.mass_scale;
    pp.i_zz *= cfg.inertia_scale;
    let dt = t / cfg.substeps as f64;
    let mut cur = *xi;
    for _ in 0..cfg.substeps {
        cur = euler_step_raw(&cur, u, &pp, track, dt, cfg.tire)?;
    }
    cur.e_psi = crate::track::wrap_angle(cur.e_psi);
    if track.closed {
        cur.s = cur.s.rem_euclid(track.total_length());
    }
    Ok(cur)
}

/// One discrete step of the linearized nominal (linear-tire) model:
/// xi+ = A xi + B u + d, exact at the linearization point.
#[derive(Debug, Clone)]
pub struct LinearizedDynamics {
    pub a: [[f64; 6]; 6],
    pub b: [[f64; 2]; 6],
    pub d: [f64; 6],
}

impl LinearizedDynamics {
    pub fn apply(&self, xi: &[f64; 6], u: &[f64; 2]) -> [f64; 6] {
        let mut out = self.d;
        for i in 0..6 {
            for j in 0..6 {
                out[i] += self.a[i][j] * xi[j];
            }
            for j in 0..2 {
                out[i] += self.b[i][j] * u[j];
            }
        }
        out
    }
}

/// Analytic Jacobians of the linear-tire model, discretized with period t.
pub fn linearize(
    xi: &VehicleState,
    u: &ControlInput,
    p: &VehicleParams,
    track: &Track,
    t: f64,
) -> Result<LinearizedDynamics, VehicleError> {
    let kappa = track.curvature_at(xi.s);
    let denom = 1.0 - kappa * xi.e_y;
    if denom <= FRENET_GUARD {
        return Err(VehicleError::NearSingularFrenet(denom));
    }
    let v = xi.v_x.max(SLIP_EPS);
    let dv_dvx = if xi.v_x > SLIP_EPS { 1.0 } else { 0.0 };
    let n_f = xi.v_y + p.l_f * xi.psi_dot;
    let n_r = xi.v_y - p.l_r * xi.psi_dot;
    let den_f = v * v + n_f * n_f;
    let den_r = v * v + n_r * n_r;
    // slip-angle partials
    let daf = [n_f / den_f * dv_dvx, -v / den_f, -p.l_f * v / den_f];
    let dar = [n_r / den_r * dv_dvx, -v / den_r, p.l_r * v / den_r];
    let (alpha_f, _) = slip_angles(xi, u, p);
    let f_yf = p.c_alpha_f * alpha_f;
    let (sd, cd) = (u.delta.sin(), u.delta.cos());
    let (se, ce) = (xi.e_psi.sin(), xi.e_psi.cos());
    let q = (xi.v_x * ce - xi.v_y * se) / denom;
    let dq = [
        ce / denom,                           // d/dV_x
        -se / denom,                          // d/dV_y
        0.0,                                  // d/dpsi_dot
        (-xi.v_x * se - xi.v_y * ce) / denom, // d/de_psi
        q * kappa / denom,                    // d/de_y
    ];

    let mut jx = [[0.0f64; 6]; 6];
    let mut ju = [[0.0f64; 2]; 6];

    // row 0: V_x dot
    jx[0][0] = -(p.c_alpha_f * daf[0] * sd + 2.0 * p.c_xw * xi.v_x) / p.m;
    jx[0][1] = -(p.c_alpha_f * daf[1] * sd) / p.m + xi.psi_dot;
    jx[0][2] = -(p.c_alpha_f * daf[2] * sd) / p.m + xi.v_y;
    ju[0][0] = -(p.c_alpha_f * sd + f_yf * cd) / p.m;
    ju[0][1] = 1.0;

    // row 1: V_y dot
    jx[1][0] = (p.c_alpha_f * daf[0] * cd + p.c_alpha_r * dar[0]) / p.m - xi.psi_dot;
    jx[1][1] = (p.c_alpha_f * daf[1] * cd + p.c_alpha_r * dar[1]) / p.m;
    jx[1][2] = (p.c_alpha_f * daf[2] * cd + p.c_alpha_r * dar[2]) / p.m - xi.v_x;
    ju[1][0] = (p.c_alpha_f * cd - f_yf * sd) / p.m;

    // row 2: psi_dot dot
    jx[2][0] = (p.l_f * p.c_alpha_f * daf[0] * cd - p.l_r * p.c_alpha_r * dar[0]) / p.i_zz;
    jx[2][1] = (p.l_f * p.c_alpha_f * daf[1] * cd - p.l_r * p.c_alpha_r * dar[1]) / p.i_zz;
    jx[2][2] = (p.l_f * p.c_alpha_f * daf[2] * cd - p.l_r * p.c_alpha_r * dar[2]) / p.i_zz;
    ju[2][0] = (p.l_f * (p.c_alpha_f * cd - f_yf * sd)) / p.i_zz;

    // row 3: e_psi dot = psi_dot - kappa * q
    jx[3][0] = -kappa * dq[0];
    jx[3][1] = -kappa * dq[1];
    jx[3][2] = 1.0;
    jx[3][3] = -kappa * dq[3];
    jx[3][4] = -kappa * dq[4];

    // row 4: e_y dot
    jx[4][0] = se;
    jx[4][1] = ce;
    jx[4][3] = xi.v_x * ce - xi.v_y * se;

    // row 5: s dot = q
    jx[5][0] = dq[0];
    jx[5][1] = dq[1];
    jx[5][3] = dq[3];
    jx[5][4] = dq[4];

    let mut a = [[0.0f64; 6]; 6];
    let mut b = [[0.0f64; 2]; 6];
    for i in 0..6 {
        for j in 0..6 {
            a[i][j] = jx[i][j] * t + if i == j { 1.0 } else { 0.0 };
        }
        for j in 0..2 {
            b[i][j] = ju[i][j] * t;
        }
    }
    let next = euler_step_raw(xi, u, p, track, t, TireLaw::Linear)?.to_array();
    let xa = xi.to_array();
    let ua = [u.delta, u.a_x];
    let mut d = next;
    for i in 0..6 {
        for j in 0..6 {
            d[i] -= a[i][j] * xa[j];
        }
        for j in 0..2 {
            d[i] -= b[i][j] * ua[j];
        }
    }
    Ok(LinearizedDynamics { a, b, d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{Track, TrackSegment};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight_track() -> Track {
        Track::new(vec![TrackSegment::straight(1000.0)], 3.0, -3.0, false).unwrap()
    }

    fn curved_track() -> Track {
        Track::new(vec![TrackSegment::arc(1000.0, 0.02)], 3.0, -3.0, false).unwrap()
    }

    fn frictionless(p: &VehicleParams) -> VehicleParams {
        let mut q = p.clone();
        q.c_r = 0.0;
        q.c_xw = 0.0;
        q
    }

    #[test]
    fn force_free_straight_motion() {
        let p = frictionless(&VehicleParams::default());
        let t = straight_track();
        let xi = VehicleState { v_x: 10.0, ..VehicleState::zero() };
        let f = continuous_dynamics(&xi, &ControlInput::zero(), &p, &t, TireLaw::Linear).unwrap();
        for (i, v) in f.iter().enumerate() {
            if i == 5 {
                assert_relative_eq!(*v, 10.0, epsilon = 1e-12);
            } else {
                assert_relative_eq!(*v, 0.0, epsilon = 1e-12);
            }
        }
        let xi2 = xi;
        let u2 = ControlInput { delta: 0.0, a_x: 2.0 };
        let f2 = continuous_dynamics(&xi2, &u2, &p, &t, TireLaw::Linear).unwrap();
        assert_relative_eq!(f2[0], 2.0, epsilon = 1e-12);
        for i in 1..5 {
            assert_relative_eq!(f2[i], 0.0, epsilon = 1e-12);
        }
    }

    /// Independent re-derivation of the six rows, written directly from the
    /// force/kinematics balance rather than via the shared helpers.
    fn dynamics_oracle(xi: &VehicleState, u: &ControlInput, p: &VehicleParams, kappa: f64, phi: f64) -> [f64; 6] {
        let vx_eff = if xi.v_x > 0.5 { xi.v_x } else { 0.5 };
        let af = u.delta - ((xi.v_y + p.l_f * xi.psi_dot) / vx_eff).atan();
        let ar = -((xi.v_y - p.l_r * xi.psi_dot) / vx_eff).atan();
        let fyf = p.c_alpha_f * af;
        let fyr = p.c_alpha_r * ar;
        let rx = p.c_r * p.m * p.g * if xi.v_x >= 0.0 { 1.0 } else { -1.0 };
        let fxw = p.c_xw * xi.v_x.powi(2);
        let sdot = (xi.v_x * xi.e_psi.cos() - xi.v_y * xi.e_psi.sin()) / (1.0 - kappa * xi.e_y);
        [
            u.a_x - (fyf * u.delta.sin() + rx + fxw) / p.m - p.g * phi.sin() + xi.psi_dot * xi.v_y,
            (fyf * u.delta.cos() + fyr) / p.m - xi.psi_dot * xi.v_x,
            (p.l_f * fyf * u.delta.cos() - p.l_r * fyr) / p.i_zz,
            xi.psi_dot - sdot * kappa,
            xi.v_x * xi.e_psi.sin() + xi.v_y * xi.e_psi.cos(),
            sdot,
        ]
    }

    #[test]
    fn randomized_rows_match_independent_derivation() {
        let p = VehicleParams::default();
        let track = curved_track();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let xi = VehicleState {
                v_x: rng.gen_range(2.0..30.0),
                v_y: rng.gen_range(-2.0..2.0),
                psi_dot: rng.gen_range(-1.0..1.0),
                e_psi: rng.gen_range(-0.5..0.5),
                e_y: rng.gen_range(-2.0..2.0),
                s: rng.gen_range(0.0..900.0),
            };
            let u = ControlInput { delta: rng.gen_range(-0.3..0.3), a_x: rng.gen_range(-5.0..5.0) };
            let f = continuous_dynamics(&xi, &u, &p, &track, TireLaw::Linear).unwrap();
            let g = dynamics_oracle(&xi, &u, &p, 0.02, 0.0);
            for i in 0..6 {
                assert!((f[i] - g[i]).abs() < 1e-12, "row {i}: {} vs {}", f[i], g[i]);
            }
        }
    }

    #[test]
    fn pacejka_magic_formula_value() {
        let mut p = VehicleParams::default();
        p.mu = 1.0;
        p.pacejka_front = PacejkaParams { b: 10.0, c: 1.9, d_scale: 1.0 };
        let f = tire_force(Axle::Front, 0.1, 1000.0, &p, TireLaw::Pacejka);
        let expect = 1000.0 * (1.9 * (10.0f64 * 0.1).atan()).sin();
        assert_relative_eq!(f, expect, epsilon = 1e-12);
        assert!((expect - 996.93).abs() < 0.05);
        assert_eq!(tire_force(Axle::Front, 0.0, 1000.0, &p, TireLaw::Pacejka), 0.0);
        assert_eq!(tire_force(Axle::Rear, 0.0, 1000.0, &p, TireLaw::Linear), 0.0);
        let mut p2 = VehicleParams::default();
        p2.c_alpha_f = 5000.0;
        assert_relative_eq!(tire_force(Axle::Front, 0.02, 0.0, &p2, TireLaw::Linear), 100.0, epsilon = 1e-12);
    }

    #[test]
    fn euler_step_basics() {
        let p = frictionless(&VehicleParams::default());
        let t = straight_track();
        // stationary equilibrium
        let xi0 = VehicleState::zero();
        let xi1 = euler_step(&xi0, &ControlInput::zero(), &p, &t, 0.05, TireLaw::Linear).unwrap();
        assert_eq!(xi1, xi0);
        // row-6 integration
        let xi = VehicleState { v_x: 10.0, ..VehicleState::zero() };
        let xi2 = euler_step(&xi, &ControlInput::zero(), &p, &t, 0.05, TireLaw::Linear).unwrap();
        assert_relative_eq!(xi2.s, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn euler_convergence_order() {
        let p = VehicleParams::default();
        let track = curved_track();
        let xi = VehicleState { v_x: 15.0, v_y: 0.3, psi_dot: 0.2, e_psi: 0.05, e_y: 0.5, s: 10.0 };
        let u = ControlInput { delta: 0.05, a_x: 1.0 };
        let step_n = |n: usize, t: f64| {
            let mut cur = xi;
            for _ in 0..n {
                cur = euler_step_raw(&cur, &u, &p, &track, t / n as f64, TireLaw::Linear).unwrap();
            }
            cur
        };
        let t = 0.1;
        let reference = step_n(100, t).to_array();
        let full = step_n(1, t).to_array();
        let half = step_n(2, t).to_array();
        let err_full: f64 = full.iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum();
        let err_half: f64 = half.iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum();
        // halving the step should roughly halve the global error of Euler
        assert!(err_half < 0.7 * err_full, "err_full={err_full}, err_half={err_half}");
    }

    #[test]
    fn plant_matches_substepped_nominal_when_unperturbed() {
        let p = VehicleParams::default();
        let track = curved_track();
        let xi = VehicleState { v_x: 12.0, v_y: 0.2, psi_dot: 0.1, e_psi: 0.03, e_y: 0.2, s: 5.0 };
        let u = ControlInput { delta: 0.04, a_x: 0.5 };
        let cfg = PlantConfig { mass_scale: 1.0, inertia_scale: 1.0, tire: TireLaw::Linear, substeps: 10 };
        let a = plant_step(&xi, &u, &p, &cfg, &track, 0.05).unwrap();
        let mut b = xi;
        for _ in 0..10 {
            b = euler_step_raw(&b, &u, &p, &track, 0.005, TireLaw::Linear).unwrap();
        }
        for (x, y) in a.to_array().iter().zip(b.to_array().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatch_grows_with_speed_and_steering() {
        let p = VehicleParams::default();
        let track = straight_track();
        let cfg = PlantConfig::default();
        // substepped nominal oracle, so the comparison isolates the
        // tire/parameter mismatch from the Euler integration error
        let nominal_substepped = |xi: &VehicleState, u: &ControlInput| {
            let mut cur = *xi;
            for _ in 0..10 {
                cur = euler_step_raw(&cur, u, &p, &track, 0.005, TireLaw::Linear).unwrap();
            }
            cur
        };
        let low = VehicleState { v_x: 5.0, ..VehicleState::zero() };
        let u_small = ControlInput { delta: 0.002, a_x: 0.0 };
        let plant_low = plant_step(&low, &u_small, &p, &cfg, &track, 0.05).unwrap();
        let nom_low = nominal_substepped(&low, &u_small);
        let dv_low = (plant_low.v_y - nom_low.v_y).abs();
        assert!(dv_low < 1e-3, "low-speed linear-regime mismatch {dv_low}");

        let high = VehicleState { v_x: 30.0, ..VehicleState::zero() };
        let u_big = ControlInput { delta: 0.15, a_x: 0.0 };
        let plant_high = plant_step(&high, &u_big, &p, &cfg, &track, 0.05).unwrap();
        let nom_high = nominal_substepped(&high, &u_big);
        let dv_high = (plant_high.v_y - nom_high.v_y).abs();
        assert!(dv_high > dv_low, "expected larger mismatch at the limits: {dv_high} vs {dv_low}");
    }

    #[test]
    fn linearize_affine_consistency() {
        let p = VehicleParams::default();
        let track = curved_track();
        let xi = VehicleState { v_x: 14.0, v_y: -0.4, psi_dot: 0.3, e_psi: -0.1, e_y: 0.8, s: 40.0 };
        let u = ControlInput { delta: -0.06, a_x: 2.0 };
        let lin = linearize(&xi, &u, &p, &track, 0.05).unwrap();
        let pred = lin.apply(&xi.to_array(), &[u.delta, u.a_x]);
        let exact = euler_step_raw(&xi, &u, &p, &track, 0.05, TireLaw::Linear).unwrap().to_array();
        for i in 0..6 {
            assert!((pred[i] - exact[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = VehicleParams::default();
        let track = curved_track();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = 0.05;
        for _ in 0..20 {
            let xi = VehicleState {
                v_x: rng.gen_range(3.0..25.0),
                v_y: rng.gen_range(-2.0..2.0),
                psi_dot: rng.gen_range(-1.0..1.0),
                e_psi: rng.gen_range(-0.4..0.4),
                e_y: rng.gen_range(-1.5..1.5),
                s: rng.gen_range(0.0..900.0),
            };
            let u = ControlInput { delta: rng.gen_range(-0.3..0.3), a_x: rng.gen_range(-4.0..4.0) };
            let lin = linearize(&xi, &u, &p, &track, t).unwrap();
            let h = 1e-6;
            for j in 0..6 {
                if j == 5 {
                    continue; // curvature is piecewise constant in s
                }
                let mut xp = xi.to_array();
                let mut xm = xi.to_array();
                xp[j] += h;
                xm[j] -= h;
                let fp = continuous_dynamics(&VehicleState::from_array(xp), &u, &p, &track, TireLaw::Linear).unwrap();
                let fm = continuous_dynamics(&VehicleState::from_array(xm), &u, &p, &track, TireLaw::Linear).unwrap();
                for i in 0..6 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let an = (lin.a[i][j] - if i == j { 1.0 } else { 0.0 }) / t;
                    let scale = fd.abs().max(an.abs()).max(1e-3);
                    assert!(((fd - an) / scale).abs() < 1e-5, "A[{i}][{j}] fd={fd} an={an}");
                }
            }
            for j in 0..2 {
                let mut up = [u.delta, u.a_x];
                let mut um = up;
                up[j] += h;
                um[j] -= h;
                let fp = continuous_dynamics(&xi, &ControlInput { delta: up[0], a_x: up[1] }, &p, &track, TireLaw::Linear).unwrap();
                let fm = continuous_dynamics(&xi, &ControlInput { delta: um[0], a_x: um[1] }, &p, &track, TireLaw::Linear).unwrap();
                for i in 0..6 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let an = lin.b[i][j] / t;
                    let scale = fd.abs().max(an.abs()).max(1e-3);
                    assert!(((fd - an) / scale).abs() < 1e-5, "B[{i}][{j}] fd={fd} an={an}");
                }
            }
        }
    }

    #[test]
    fn jacobian_row6_on_straight() {
        let p = VehicleParams::default();
        let track = straight_track();
        let xi = VehicleState { v_x: 10.0, ..VehicleState::zero() };
        let lin = linearize(&xi, &ControlInput::zero(), &p, &track, 0.05).unwrap();
        assert_relative_eq!(lin.a[5][0] - 0.0, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn coastdown_is_nonincreasing() {
        let p = VehicleParams::default();
        let track = straight_track();
        let mut xi = VehicleState { v_x: 20.0, ..VehicleState::zero() };
        for _ in 0..100 {
            let next = euler_step(&xi, &ControlInput::zero(), &p, &track, 0.05, TireLaw::Linear).unwrap();
            assert!(next.v_x <= xi.v_x);
            xi = next;
        }
    }

    #[test]
    fn left_right_symmetry() {
        let p = frictionless(&VehicleParams::default());
        let plus = Track::new(vec![TrackSegment::arc(1000.0, 0.02)], 3.0, -3.0, false).unwrap();
        let minus = Track::new(vec![TrackSegment::arc(1000.0, -0.02)], 3.0, -3.0, false).unwrap();
        let xi = VehicleState { v_x: 12.0, v_y: 0.5, psi_dot: 0.3, e_psi: 0.1, e_y: 0.4, s: 10.0 };
        let u = ControlInput { delta: 0.1, a_x: 1.0 };
        let mirrored = VehicleState { v_x: 12.0, v_y: -0.5, psi_dot: -0.3, e_psi: -0.1, e_y: -0.4, s: 10.0 };
        let um = ControlInput { delta: -0.1, a_x: 1.0 };
        let f = continuous_dynamics(&xi, &u, &p, &plus, TireLaw::Linear).unwrap();
        let g = continuous_dynamics(&mirrored, &um, &p, &minus, TireLaw::Linear).unwrap();
        assert_relative_eq!(f[0], g[0], epsilon = 1e-12);
        assert_relative_eq!(f[1], -g[1], epsilon = 1e-12);
        assert_relative_eq!(f[2], -g[2], epsilon = 1e-12);
        assert_relative_eq!(f[3], -g[3], epsilon = 1e-12);
        assert_relative_eq!(f[4], -g[4], epsilon = 1e-12);
        assert_relative_eq!(f[5], g[5], epsilon = 1e-12);
    }

    #[test]
    fn near_singular_frenet_guard() {
        let p = VehicleParams::default();
        let track = Track::new(vec![TrackSegment::arc(100.0, 0.4)], 2.0, -2.0, false).unwrap();
        let xi = VehicleState { v_x: 5.0, e_y: 2.4, ..VehicleState::zero() };
        assert!(continuous_dynamics(&xi, &ControlInput::zero(), &p, &track, TireLaw::Linear).is_err());
    }
}
