//! Convex QP solver (operator splitting with an active-set polish step) and a
//! small SQP driver. All optimal-control stacks in this crate reduce their
//! subproblems to `QpProblem` instances solved here; determinism matters more
//! than raw speed at this scale.

use nalgebra::{DMatrix, DVector};

const SIGMA: f64 = 1e-6;
const DIAG_REG: f64 = 1e-9;
const RELAX_ALPHA: f64 = 1.6;
const EQ_RHO_FACTOR: f64 = 1e3;

/// min ½ xᵀH x + gᵀx  s.t.  A_eq x = b_eq,  lower ≤ A_in x ≤ upper.
///
/// H is symmetrized on construction; box constraints are inequality rows of
/// the identity.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers for the stacked [equality; inequality] rows.
    pub duals: DVector<f64>,
    pub status: SolveStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 20_000 }
    }
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        assert_eq!(h.nrows(), n);
        assert_eq!(h.ncols(), n);
        let h = (&h + h.transpose()) * 0.5;
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn add_equalities(&mut self, a: DMatrix<f64>, b: DVector<f64>) {
        assert_eq!(a.ncols(), self.n());
        assert_eq!(a.nrows(), b.len());
        self.a_eq = stack_rows(&self.a_eq, &a);
        self.b_eq = stack_vec(&self.b_eq, &b);
    }

    pub fn add_inequalities(&mut self, a: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) {
        assert_eq!(a.ncols(), self.n());
        assert_eq!(a.nrows(), lower.len());
        assert_eq!(a.nrows(), upper.len());
        self.a_in = stack_rows(&self.a_in, &a);
        self.lower = stack_vec(&self.lower, &lower);
        self.upper = stack_vec(&self.upper, &upper);
    }

    /// Box bounds on a contiguous slice of variables.
    pub fn add_box(&mut self, start: usize, lower: &[f64], upper: &[f64]) {
        let k = lower.len();
        let mut a = DMatrix::zeros(k, self.n());
        for i in 0..k {
            a[(i, start + i)] = 1.0;
        }
        self.add_inequalities(
            a,
            DVector::from_column_slice(lower),
            DVector::from_column_slice(upper),
        );
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.h * x)[(0, 0)] + self.g.dot(x)
    }
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Independently recomputed KKT residuals at (x, duals): stationarity
/// ‖Hx + g + Aᵀy‖∞, feasibility (constraint violation), and complementarity
/// slackness, all as a single max for easy thresholding.
pub fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> (f64, f64, f64) {
    let m_eq = p.b_eq.len();
    let mut stat = &p.h * &sol.x + &p.g;
    if m_eq > 0 {
        stat += p.a_eq.transpose() * sol.duals.rows(0, m_eq);
    }
    if p.lower.len() > 0 {
        stat += p.a_in.transpose() * sol.duals.rows(m_eq, p.lower.len());
    }
    let stationarity = stat.amax();

    let mut feas: f64 = 0.0;
    if m_eq > 0 {
        feas = feas.max((&p.a_eq * &sol.x - &p.b_eq).amax());
    }
    let mut comp: f64 = 0.0;
    if p.lower.len() > 0 {
        let ax = &p.a_in * &sol.x;
        for i in 0..p.lower.len() {
            feas = feas.max((p.lower[i] - ax[i]).max(0.0));
            feas = feas.max((ax[i] - p.upper[i]).max(0.0));
            let y = sol.duals[m_eq + i];
            // y < 0 pairs with the lower bound, y > 0 with the upper bound.
            if y < 0.0 {
                comp = comp.max(y.abs() * (ax[i] - p.lower[i]).abs());
            } else {
                comp = comp.max(y * (p.upper[i] - ax[i]).abs());
            }
        }
    }
    (stationarity, feas, comp)
}

pub fn solve_qp(p: &QpProblem, settings: &QpSettings) -> QpSolution {
    solve_qp_warm(p, settings, None)
}

/// `warm` carries (x, duals) from a previous, similar problem — e.g. the
/// shifted solution of the last MPC step — and typically cuts the iteration
/// count by an order of magnitude. Results remain deterministic for a given
/// warm start.
pub fn solve_qp_warm(
    p: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> QpSolution {
    let n = p.n();
    let m_eq = p.b_eq.len();
    let m_in = p.lower.len();
    let m = m_eq + m_in;

    let mut h_reg = p.h.clone();
    for i in 0..n {
        h_reg[(i, i)] += DIAG_REG;
    }

    if m == 0 {
        let x = h_reg
            .clone()
            .cholesky()
            .map(|c| c.solve(&(-&p.g)))
            .unwrap_or_else(|| h_reg.clone().lu().solve(&(-&p.g)).unwrap_or(DVector::zeros(n)));
        let dual_res = (&p.h * &x + &p.g).amax();
        return QpSolution {
            x,
            duals: DVector::zeros(0),
            status: if dual_res <= settings.tol { SolveStatus::Optimal } else { SolveStatus::MaxIter },
            primal_residual: 0.0,
            dual_residual: dual_res,
        };
    }

    // Stack equalities (as l = u rows) on top of inequalities.
    let a0 = stack_rows(&p.a_eq, &p.a_in);
    let l0 = stack_vec(&p.b_eq, &p.lower);
    let u0 = stack_vec(&p.b_eq, &p.upper);

    // Modified Ruiz equilibration with cost normalization: bring the
    // rows/columns of [H Aᵀ; A 0] toward unit infinity norm so a single
    // tolerance covers cost terms of very different magnitudes. The iteration
    // runs on the scaled data; termination residuals are evaluated on the
    // original problem.
    let mut h_s = p.h.clone();
    let mut g_s = p.g.clone();
    let mut a = a0.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c_cost = 1.0_f64;
    for _ in 0..10 {
        let mut delta = DVector::from_element(n, 1.0);
        for j in 0..n {
            let mut nrm = 0.0_f64;
            for i in 0..n {
                nrm = nrm.max(h_s[(i, j)].abs());
            }
            for i in 0..m {
                nrm = nrm.max(a[(i, j)].abs());
            }
            if nrm > 1e-12 {
                delta[j] = 1.0 / nrm.sqrt();
            }
        }
        let mut eps = DVector::from_element(m, 1.0);
        for i in 0..m {
            let mut nrm = 0.0_f64;
            for j in 0..n {
                nrm = nrm.max(a[(i, j)].abs());
            }
            if nrm > 1e-12 {
                eps[i] = 1.0 / nrm.sqrt();
            }
        }
        for i in 0..n {
            for j in 0..n {
                h_s[(i, j)] *= delta[i] * delta[j];
            }
        }
        for j in 0..n {
            g_s[j] *= delta[j];
            d[j] *= delta[j];
        }
        for i in 0..m {
            for j in 0..n {
                a[(i, j)] *= eps[i] * delta[j];
            }
            e[i] *= eps[i];
        }
        let mut colmax_sum = 0.0;
        for j in 0..n {
            let mut nrm = 0.0_f64;
            for i in 0..n {
                nrm = nrm.max(h_s[(i, j)].abs());
            }
            colmax_sum += nrm;
        }
        let gamma_den = (colmax_sum / n as f64).max(g_s.amax());
        if gamma_den > 1e-12 {
            let gamma = 1.0 / gamma_den;
            h_s *= gamma;
            g_s *= gamma;
            c_cost *= gamma;
        }
    }
    let l = DVector::from_fn(m, |i, _| l0[i] * e[i]);
    let u = DVector::from_fn(m, |i, _| u0[i] * e[i]);
    let h_reg = {
        let mut h = h_s;
        for i in 0..n {
            h[(i, i)] += DIAG_REG;
        }
        h
    };

    let mut rho_base = 0.1;
    let rho_vec = |rho: f64| -> DVector<f64> {
        DVector::from_fn(m, |i, _| if i < m_eq { rho * EQ_RHO_FACTOR } else { rho })
    };

    let factorize = |rho: f64| {
        let mut kkt = h_reg.clone();
        for i in 0..n {
            kkt[(i, i)] += SIGMA;
        }
        let rv = rho_vec(rho);
        for r in 0..m {
            let row = a.row(r);
            // kkt += rho_r * a_rᵀ a_r
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in 0..n {
                    kkt[(i, j)] += rv[r] * ri * row[j];
                }
            }
        }
        kkt.cholesky().expect("regularized KKT matrix must be SPD")
    };

    let mut chol = factorize(rho_base);
    let mut x = DVector::zeros(n);
    let mut y: DVector<f64> = DVector::zeros(m);
    if let Some((wx, wy)) = warm {
        if wx.len() == n && wy.len() == m {
            // map the unscaled warm start into the scaled space
            x = DVector::from_fn(n, |j, _| wx[j] / d[j]);
            y = DVector::from_fn(m, |i, _| wy[i] * c_cost / e[i]);
        }
    }
    let mut z: DVector<f64> = &a * &x;
    // project initial z into the bounds
    for i in 0..m {
        z[i] = z[i].clamp(l[i], u[i]);
    }

    let mut status = SolveStatus::MaxIter;
    let mut r_prim = f64::INFINITY;
    let mut r_dual = f64::INFINITY;
    let mut y_check = y.clone();
    PROFILE_SOLVES.fetch_add(1, std::sync::atomic::Ordering::Relaxed);

    let mut rv = rho_vec(rho_base);
    let mut w = DVector::zeros(m);
    for iter in 0..settings.max_iter {
        // x-update
        let mut rhs = SIGMA * &x - &g_s;
        for i in 0..m {
            w[i] = rv[i] * z[i] - y[i];
        }
        rhs.gemv_tr(1.0, &a, &w, 1.0);
        let x_new = chol.solve(&rhs);
        let ax = &a * &x_new;

        // relaxed z/y updates
        for i in 0..m {
            let v = RELAX_ALPHA * ax[i] + (1.0 - RELAX_ALPHA) * z[i] + y[i] / rv[i];
            let zi = v.clamp(l[i], u[i]);
            y[i] += rv[i] * (RELAX_ALPHA * ax[i] + (1.0 - RELAX_ALPHA) * z[i] - zi);
            z[i] = zi;
        }
        x = x_new;

        if iter % 25 == 24 || iter + 1 == settings.max_iter {
            PROFILE_ITERS.fetch_add(25, std::sync::atomic::Ordering::Relaxed);
            // residuals of the original (unscaled) problem
            let ax = &a * &x;
            r_prim = (0..m).fold(0.0_f64, |acc, i| acc.max(((ax[i] - z[i]) / e[i]).abs()));
            let mut stat = &h_reg * &x + &g_s;
            stat.gemv_tr(1.0, &a, &y, 1.0);
            r_dual =
                (0..n).fold(0.0_f64, |acc, j| acc.max((stat[j] / (c_cost * d[j])).abs()));
            if r_prim <= settings.tol && r_dual <= settings.tol {
                status = SolveStatus::Optimal;
                break;
            }
            // primal infeasibility certificate: the multipliers drift along a
            // direction dy in the row null-space of Aᵀ whose supported bound
            // combination is negative — no x can satisfy the constraints
            let dy = &y - &y_check;
            let dy_norm = dy.amax();
            if dy_norm > 1e-10 {
                let at_dy = a.transpose() * &dy;
                let mut support = 0.0;
                for i in 0..m {
                    support += if dy[i] > 0.0 { u[i] * dy[i] } else { l[i] * dy[i] };
                }
                if at_dy.amax() <= 1e-8 * dy_norm && support < -1e-8 * dy_norm {
                    status = SolveStatus::Infeasible;
                    break;
                }
            }
            y_check = y.clone();
        }

        // periodic rho adaptation
        if iter % 200 == 199 && r_prim.is_finite() && r_dual.is_finite() {
            let ratio = (r_prim.max(1e-12) / r_dual.max(1e-12)).sqrt();
            let new_rho = (rho_base * ratio).clamp(1e-6, 1e6);
            if new_rho > rho_base * 5.0 || new_rho < rho_base / 5.0 {
                rho_base = new_rho;
                rv = rho_vec(rho_base);
                chol = factorize(rho_base);
            }
        }
    }

    // map back to the original variables and multipliers
    let x_out = DVector::from_fn(n, |j, _| x[j] * d[j]);
    let y_out = DVector::from_fn(m, |i, _| y[i] * e[i] / c_cost);
    let mut sol =
        QpSolution { x: x_out, duals: y_out, status, primal_residual: r_prim, dual_residual: r_dual };
    if sol.status == SolveStatus::Optimal {
        polish(p, &a0, &l0, &u0, m_eq, settings, &mut sol);
    }
    sol
}

/// Solve the equality-constrained KKT system on the detected active set and
/// keep the refined solution when it is at least as good.
fn polish(
    p: &QpProblem,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    m_eq: usize,
    settings: &QpSettings,
    sol: &mut QpSolution,
) {
    let n = p.n();
    let m = l.len();
    let ax = a * &sol.x;
    let mut active: Vec<(usize, f64)> = Vec::new(); // (row, bound value)
    for i in 0..m {
        if i < m_eq {
            active.push((i, l[i]));
        } else if sol.duals[i] < -settings.tol || ax[i] - l[i] < settings.tol {
            active.push((i, l[i]));
        } else if sol.duals[i] > settings.tol || u[i] - ax[i] < settings.tol {
            active.push((i, u[i]));
        }
    }
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
    for i in 0..n {
        kkt[(i, i)] += DIAG_REG;
    }
    for (r, &(row, _)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = a[(row, j)];
            kkt[(j, n + r)] = a[(row, j)];
        }
        kkt[(n + r, n + r)] = -DIAG_REG;
    }
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&p.g));
    for (r, &(_, b)) in active.iter().enumerate() {
        rhs[n + r] = b;
    }
    let Some(xl) = kkt.lu().solve(&rhs) else { return };
    let x_pol = DVector::from(xl.rows(0, n).clone_owned());
    let mut duals_pol = DVector::zeros(m);
    for (r, &(row, _)) in active.iter().enumerate() {
        duals_pol[row] = xl[n + r];
    }

    // evaluate the polished point
    let ax_pol = a * &x_pol;
    let mut prim: f64 = 0.0;
    for i in 0..m {
        prim = prim.max((l[i] - ax_pol[i]).max(0.0)).max((ax_pol[i] - u[i]).max(0.0));
    }
    let dual = (&p.h * &x_pol + &p.g + a.transpose() * &duals_pol).amax();
    // dual sign sanity on inactive rows already holds (zero); on active rows
    // a wrong sign means a misidentified set — reject then.
    let mut signs_ok = true;
    for &(row, b) in &active {
        if row < m_eq {
            continue;
        }
        let y = duals_pol[row];
        if (b == l[row] && l[row] < u[row] && y > settings.tol)
            || (b == u[row] && l[row] < u[row] && y < -settings.tol)
        {
            signs_ok = false;
            break;
        }
    }
    if signs_ok && prim <= sol.primal_residual.max(settings.tol) && dual <= sol.dual_residual.max(settings.tol) {
        sol.x = x_pol;
        sol.duals = duals_pol;
        sol.primal_residual = prim;
        sol.dual_residual = dual;
    }
}

/// One SQP subproblem: quadratic model of the cost and linearized constraints
/// expressed in the *step* d about the current iterate; the driver adds
/// trust-region bounds on d and applies full steps.
pub trait SqpModel {
    /// Number of decision variables.
    fn dim(&self) -> usize;
    /// Build the QP in the step variables about `x`.
    fn quadratize(&self, x: &[f64]) -> QpProblem;
}

#[derive(Debug, Clone)]
pub struct SqpSettings {
    pub max_outer: usize,
    /// Per-variable trust-region half width (broadcast when length 1).
    pub trust_region: Vec<f64>,
    pub step_tol: f64,
    pub qp: QpSettings,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self { max_outer: 10, trust_region: vec![1e3], step_tol: 1e-8, qp: QpSettings::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    MaxIter,
    /// A QP subproblem failed; the last trajectory is returned unchanged.
    Degraded,
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub x: Vec<f64>,
    pub status: SqpStatus,
    pub iterations: usize,
}

pub fn sqp_solve(model: &impl SqpModel, x0: &[f64], settings: &SqpSettings) -> SqpResult {
    let n = model.dim();
    assert_eq!(x0.len(), n);
    let mut x = x0.to_vec();
    let tr = |i: usize| -> f64 {
        if settings.trust_region.len() == 1 {
            settings.trust_region[0]
        } else {
            settings.trust_region[i]
        }
    };
    for iter in 0..settings.max_outer {
        let mut qp = model.quadratize(&x);
        let lower: Vec<f64> = (0..n).map(|i| -tr(i)).collect();
        let upper: Vec<f64> = (0..n).map(|i| tr(i)).collect();
        qp.add_box(0, &lower, &upper);
        let sol = solve_qp(&qp, &settings.qp);
        if sol.status == SolveStatus::Infeasible {
            return SqpResult { x, status: SqpStatus::Degraded, iterations: iter };
        }
        let step_norm = sol.x.amax();
        for i in 0..n {
            x[i] += sol.x[i];
        }
        if step_norm < settings.step_tol {
            return SqpResult { x, status: SqpStatus::Converged, iterations: iter + 1 };
        }
    }
    SqpResult { x, status: SqpStatus::MaxIter, iterations: settings.max_outer }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clamped_scalar() {
        // min ½x² − x on [0, 0.4] → x* = 0.4
        let mut p = QpProblem::new(DMatrix::identity(1, 1), DVector::from_element(1, -1.0));
        p.add_box(0, &[0.0], &[0.4]);
        let sol = solve_qp(&p, &QpSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 0.4, epsilon = 1e-6);
    }

    #[test]
    fn unconstrained_stationarity() {
        let p = QpProblem::new(
            DMatrix::identity(4, 4) * 2.0,
            DVector::from_element(4, -2.0),
        );
        let sol = solve_qp(&p, &QpSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        for i in 0..4 {
            assert_relative_eq!(sol.x[i], 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn equality_constrained_matches_kkt_oracle() {
        // min ½xᵀHx + gᵀx s.t. sum(x) = 1 with random SPD H; compare against
        // a direct dense KKT solve.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let n = 5;
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let mut p = QpProblem::new(h.clone(), g.clone());
            let a = DMatrix::from_element(1, n, 1.0);
            let b = DVector::from_element(1, 1.0);
            p.add_equalities(a.clone(), b.clone());
            let sol = solve_qp(&p, &QpSettings::default());
            assert_eq!(sol.status, SolveStatus::Optimal);

            let mut kkt = DMatrix::zeros(n + 1, n + 1);
            kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
            for j in 0..n {
                kkt[(n, j)] = 1.0;
                kkt[(j, n)] = 1.0;
            }
            let mut rhs = DVector::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&(-&g));
            rhs[n] = 1.0;
            let xl = kkt.lu().solve(&rhs).unwrap();
            for i in 0..n {
                assert!((sol.x[i] - xl[i]).abs() < 1e-6);
            }
        }
    }

    /// Brute-force box-QP oracle: enumerate all {lower, upper, free}
    /// assignments, solve the reduced stationarity system, keep the feasible
    /// candidate with the lowest objective.
    fn box_qp_oracle(h: &DMatrix<f64>, g: &DVector<f64>, l: &[f64], u: &[f64]) -> DVector<f64> {
        let n = g.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let mut fixed = vec![None; n];
            for slot in fixed.iter_mut() {
                *slot = match c % 3 {
                    0 => None,
                    1 => Some(false), // at lower
                    _ => Some(true),  // at upper
                };
                c /= 3;
            }
            let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
            let nf = free.len();
            let mut x = DVector::zeros(n);
            for i in 0..n {
                if let Some(up) = fixed[i] {
                    x[i] = if up { u[i] } else { l[i] };
                }
            }
            if nf > 0 {
                let mut hf = DMatrix::zeros(nf, nf);
                let mut rhs = DVector::zeros(nf);
                for (a, &i) in free.iter().enumerate() {
                    rhs[a] = -g[i];
                    for (b, &j) in free.iter().enumerate() {
                        hf[(a, b)] = h[(i, j)];
                    }
                    for j in 0..n {
                        if fixed[j].is_some() {
                            rhs[a] -= h[(i, j)] * x[j];
                        }
                    }
                }
                let Some(xf) = hf.lu().solve(&rhs) else { continue };
                for (a, &i) in free.iter().enumerate() {
                    x[i] = xf[a];
                }
            }
            let feasible = (0..n).all(|i| x[i] >= l[i] - 1e-9 && x[i] <= u[i] + 1e-9);
            if !feasible {
                continue;
            }
            let obj = 0.5 * (x.transpose() * h * &x)[(0, 0)] + g.dot(&x);
            if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                best = Some((obj, x));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn random_box_qps_match_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let n = rng.gen_range(2..=6);
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.3;
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let l: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..0.0)).collect();
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut p = QpProblem::new(h.clone(), g.clone());
            p.add_box(0, &l, &u);
            let sol = solve_qp(&p, &QpSettings::default());
            assert_eq!(sol.status, SolveStatus::Optimal, "trial {trial}");
            let oracle = box_qp_oracle(&h, &g, &l, &u);
            for i in 0..n {
                assert!(
                    (sol.x[i] - oracle[i]).abs() < 1e-5,
                    "trial {trial} var {i}: {} vs {}",
                    sol.x[i],
                    oracle[i]
                );
            }
            let (stat, feas, comp) = kkt_residuals(&p, &sol);
            assert!(stat <= 2e-6 && feas <= 2e-6 && comp <= 2e-6, "trial {trial}: {stat} {feas} {comp}");
        }
    }

    #[test]
    fn objective_never_above_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 4;
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.2;
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let l = vec![-0.5; n];
            let u = vec![0.8; n];
            let mut p = QpProblem::new(h, g);
            p.add_box(0, &l, &u);
            let sol = solve_qp(&p, &QpSettings::default());
            let opt = p.objective(&sol.x);
            for _ in 0..50 {
                let pt = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.8));
                assert!(opt <= p.objective(&pt) + 1e-8);
            }
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 5;
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.3;
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let mut p = QpProblem::new(h, g);
        p.add_box(0, &[-1.0; 5], &[1.0; 5]);
        let s1 = solve_qp(&p, &QpSettings::default());
        let s2 = solve_qp(&p, &QpSettings::default());
        assert_eq!(s1.x.as_slice(), s2.x.as_slice());
        assert_eq!(s1.duals.as_slice(), s2.duals.as_slice());
    }

    #[test]
    fn infeasible_detected() {
        // x = 0 and x = 1 simultaneously.
        let mut p = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1));
        p.add_equalities(DMatrix::identity(1, 1), DVector::from_element(1, 0.0));
        p.add_equalities(DMatrix::identity(1, 1), DVector::from_element(1, 1.0));
        let sol = solve_qp(&p, &QpSettings::default());
        assert_ne!(sol.status, SolveStatus::Optimal);
    }

    struct LqModel {
        h: DMatrix<f64>,
        g: DVector<f64>,
    }

    impl SqpModel for LqModel {
        fn dim(&self) -> usize {
            self.g.len()
        }
        fn quadratize(&self, x: &[f64]) -> QpProblem {
            let xv = DVector::from_column_slice(x);
            let grad = &self.h * &xv + &self.g;
            QpProblem::new(self.h.clone(), grad)
        }
    }

    #[test]
    fn sqp_exact_on_linear_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 6;
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.4;
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let model = LqModel { h: h.clone(), g: g.clone() };
        let settings = SqpSettings { max_outer: 5, ..Default::default() };
        let res = sqp_solve(&model, &vec![0.0; n], &settings);
        // one real iteration plus the zero-step detection pass
        assert!(res.iterations <= 2);
        let direct = h.lu().solve(&(-&g)).unwrap();
        for i in 0..n {
            assert!((res.x[i] - direct[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn sqp_single_iteration_mode() {
        let model = LqModel {
            h: DMatrix::identity(2, 2),
            g: DVector::from_column_slice(&[-3.0, 2.0]),
        };
        // planner mode: exactly one linearize-solve cycle with a binding
        // trust region
        let settings = SqpSettings {
            max_outer: 1,
            trust_region: vec![1.0],
            ..Default::default()
        };
        let res = sqp_solve(&model, &[0.0, 0.0], &settings);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.status, SqpStatus::MaxIter);
        assert_relative_eq!(res.x[0], 1.0, epsilon = 1e-6); // clipped toward 3
        assert_relative_eq!(res.x[1], -1.0, epsilon = 1e-6);
    }

    /// Minimum-effort transfer of a double integrator: min Σu_k² subject to
    /// reaching (pos, vel) = (1, 0) in N steps from rest. The closed-form
    /// answer is the minimum-norm solution of the linear reachability system.
    #[test]
    fn double_integrator_minimum_effort() {
        let n_steps = 8;
        let dt = 0.2;
        // decision vector = controls only; states eliminated by hand
        // x_N = Σ_k A^{N-1-k} B u_k with A=[[1,dt],[0,1]], B=[dt²/2, dt]
        let mut c = DMatrix::zeros(2, n_steps);
        for k in 0..n_steps {
            let steps_after = (n_steps - 1 - k) as f64;
            // A^j B = [dt²/2 + j dt², dt]
            c[(0, k)] = dt * dt / 2.0 + steps_after * dt * dt;
            c[(1, k)] = dt;
        }
        let target = DVector::from_column_slice(&[1.0, 0.0]);

        let mut p = QpProblem::new(DMatrix::identity(n_steps, n_steps), DVector::zeros(n_steps));
        p.add_equalities(c.clone(), target.clone());
        let sol = solve_qp(&p, &QpSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);

        // minimum-norm oracle: u = Cᵀ(CCᵀ)⁻¹ target
        let cct = &c * c.transpose();
        let u_star = c.transpose() * cct.lu().solve(&target).unwrap();
        for k in 0..n_steps {
            assert!((sol.x[k] - u_star[k]).abs() < 1e-4, "u[{k}]: {} vs {}", sol.x[k], u_star[k]);
        }
    }

    #[test]
    fn general_inequality_rows() {
        // min ½(x²+y²) s.t. x + y ≥ 1 → x = y = 0.5
        let mut p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2));
        p.add_inequalities(
            DMatrix::from_element(1, 2, 1.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1e6),
        );
        let sol = solve_qp(&p, &QpSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.x[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(sol.x[1], 0.5, epsilon = 1e-6);
        let (stat, feas, comp) = kkt_residuals(&p, &sol);
        assert!(stat <= 2e-6 && feas <= 2e-6 && comp <= 2e-6);
    }
}
