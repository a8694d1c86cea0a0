//! Dense convex QP solver based on the alternating direction method of
//! multipliers (operator-splitting form), with Ruiz equilibration,
//! adaptive penalty, infeasibility certificates and active-set polishing.
//!
//! Problem: minimise `0.5 x'Hx + g'x` subject to `l <= Ax <= u`.
//! Multipliers follow the convention `Hx + g + A'y = 0`, so `y_i > 0` at an
//! active upper bound and `y_i < 0` at an active lower bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("row {row} has lower bound {lower} above upper bound {upper}")]
    InvertedBounds { row: usize, lower: f64, upper: f64 },
    #[error("problem data contains NaN")]
    NotANumber,
    #[error("KKT matrix could not be factorised")]
    Factorisation,
    #[error("debug dump: {0}")]
    Dump(String),
}

/// Semantic family of a constraint row, used by relaxation and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowGroup {
    InputBox,
    SpeedBounds,
    RedHeadway,
    TerminalSpeed,
    TerminalPosition,
    SlackBox,
    MaxSpacing,
    MinSpacing,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constraints: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub var_names: Vec<String>,
    pub row_groups: Vec<RowGroup>,
}

impl QpProblem {
    /// Problem with generic names and groups.
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>, constraints: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        let n = hessian.ncols();
        let m = constraints.nrows();
        Self {
            hessian,
            gradient,
            constraints,
            lower,
            upper,
            var_names: (0..n).map(|i| format!("x{i}")).collect(),
            row_groups: vec![RowGroup::Other; m],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.hessian.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.constraints.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let m = self.num_rows();
        if self.hessian.nrows() != n {
            return Err(QpError::Dimension(format!("hessian is {}x{}", self.hessian.nrows(), n)));
        }
        if self.gradient.len() != n {
            return Err(QpError::Dimension(format!("gradient has {} entries, expected {n}", self.gradient.len())));
        }
        if self.constraints.ncols() != n && m > 0 {
            return Err(QpError::Dimension(format!("constraint matrix has {} columns, expected {n}", self.constraints.ncols())));
        }
        if self.lower.len() != m || self.upper.len() != m {
            return Err(QpError::Dimension(format!("bounds have {}/{} entries, expected {m}", self.lower.len(), self.upper.len())));
        }
        if self.var_names.len() != n || self.row_groups.len() != m {
            return Err(QpError::Dimension("labels do not match problem size".into()));
        }
        let has_nan = self.hessian.iter().chain(self.gradient.iter()).chain(self.constraints.iter()).any(|v| !v.is_finite())
            || self.lower.iter().chain(self.upper.iter()).any(|v| v.is_nan());
        if has_nan {
            return Err(QpError::NotANumber);
        }
        for i in 0..m {
            if self.lower[i] > self.upper[i] {
                return Err(QpError::InvertedBounds { row: i, lower: self.lower[i], upper: self.upper[i] });
            }
        }
        Ok(())
    }
}

pub const DUMP_SCHEMA: &str = "redlight-qp/1";

/// Portable JSON form of a [`QpProblem`]: matrices as arrays of rows and
/// infinite bounds as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpDump {
    pub schema: String,
    pub num_vars: usize,
    pub num_rows: usize,
    pub var_names: Vec<String>,
    pub row_groups: Vec<RowGroup>,
    pub hessian: Vec<Vec<f64>>,
    pub gradient: Vec<f64>,
    pub constraints: Vec<Vec<f64>>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>, QpError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(QpError::Dump(format!("{what} is not {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl QpProblem {
    pub fn to_dump(&self) -> QpDump {
        let finite = |v: &DVector<f64>| v.iter().map(|b| b.is_finite().then_some(*b)).collect();
        QpDump {
            schema: DUMP_SCHEMA.to_string(),
            num_vars: self.num_vars(),
            num_rows: self.num_rows(),
            var_names: self.var_names.clone(),
            row_groups: self.row_groups.clone(),
            hessian: rows_of(&self.hessian),
            gradient: self.gradient.iter().copied().collect(),
            constraints: rows_of(&self.constraints),
            lower: finite(&self.lower),
            upper: finite(&self.upper),
        }
    }

    pub fn from_dump(d: &QpDump) -> Result<Self, QpError> {
        if d.schema != DUMP_SCHEMA {
            return Err(QpError::Dump(format!("unknown schema {:?}", d.schema)));
        }
        let (n, m) = (d.num_vars, d.num_rows);
        let bound = |v: &[Option<f64>], inf: f64| DVector::from_iterator(v.len(), v.iter().map(|b| b.unwrap_or(inf)));
        let p = QpProblem {
            hessian: matrix_from_rows(&d.hessian, n, n, "hessian")?,
            gradient: DVector::from_vec(d.gradient.clone()),
            constraints: matrix_from_rows(&d.constraints, m, n, "constraints")?,
            lower: bound(&d.lower, f64::NEG_INFINITY),
            upper: bound(&d.upper, f64::INFINITY),
            var_names: d.var_names.clone(),
            row_groups: d.row_groups.clone(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_debug_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_dump()).expect("dump serialises")
    }

    pub fn from_debug_json(text: &str) -> Result<Self, QpError> {
        let d: QpDump = serde_json::from_str(text).map_err(|e| QpError::Dump(e.to_string()))?;
        Self::from_dump(&d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
    pub max_iter: usize,
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
    pub check_interval: usize,
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_prim_inf: 1e-4,
            eps_dual_inf: 1e-4,
            max_iter: 20_000,
            scaling_iters: 10,
            adaptive_rho: true,
            check_interval: 25,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Solved,
    PrimalInfeasible,
    DualInfeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub polished: bool,
}

/// KKT residuals of a primal-dual pair in the original problem data.
///
/// A multiplier pushing against an infinite bound counts fully toward the
/// complementarity residual.
pub fn kkt_residuals(p: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
    let stationarity = (&p.hessian * x + &p.gradient + p.constraints.transpose() * y).amax();
    let ax = &p.constraints * x;
    let mut primal = 0.0f64;
    let mut complementarity = 0.0f64;
    for i in 0..p.num_rows() {
        let (l, u, a, yi) = (p.lower[i], p.upper[i], ax[i], y[i]);
        primal = primal.max(l - a).max(a - u);
        let c = if yi > 0.0 {
            if u.is_finite() { yi * (u - a).abs() } else { yi }
        } else if yi < 0.0 {
            if l.is_finite() { -yi * (a - l).abs() } else { -yi }
        } else {
            0.0
        };
        complementarity = complementarity.max(c);
    }
    KktResiduals { stationarity, primal: primal.max(0.0), complementarity }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    at: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

const SCALING_MIN: f64 = 1e-4;
const SCALING_MAX: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;

fn safe_inv_sqrt(norm: f64) -> f64 {
    let n = if norm < SCALING_MIN { 1.0 } else { norm.min(SCALING_MAX) };
    1.0 / n.sqrt()
}

fn ruiz(prob: &QpProblem, iters: usize) -> Scaled {
    let n = prob.num_vars();
    let m = prob.num_rows();
    let mut p = prob.hessian.clone();
    let mut q = prob.gradient.clone();
    let mut a = prob.constraints.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    for _ in 0..iters {
        let mut dd = DVector::zeros(n);
        for j in 0..n {
            let mut norm = p.column(j).amax();
            if m > 0 {
                norm = norm.max(a.column(j).amax());
            }
            dd[j] = safe_inv_sqrt(norm);
        }
        let mut de = DVector::zeros(m);
        for i in 0..m {
            de[i] = safe_inv_sqrt(a.row(i).amax());
        }
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                a[(i, j)] *= de[i] * dd[j];
            }
        }
        q.component_mul_assign(&dd);
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = if n > 0 { (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64 } else { 1.0 };
    let cost_norm = mean_col.max(q.amax());
    let c = safe_inv_sqrt(cost_norm).powi(2);
    p *= c;
    q *= c;
    let l = prob.lower.component_mul(&e);
    let u = prob.upper.component_mul(&e);
    let at = a.transpose();
    Scaled { p, q, a, at, l, u, d, e, c }
}

fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        l.len(),
        l.iter().zip(u.iter()).map(|(&lo, &hi)| {
            if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
                RHO_MIN
            } else if lo == hi {
                RHO_EQ_FACTOR * rho
            } else {
                rho
            }
        }),
    )
}

fn factor(s: &Scaled, sigma: f64, rho_vec: &DVector<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, QpError> {
    let n = s.p.ncols();
    let mut k = s.p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    if s.a.nrows() > 0 {
        let mut ra = s.a.clone();
        for i in 0..ra.nrows() {
            ra.row_mut(i).scale_mut(rho_vec[i]);
        }
        k += &s.at * ra;
    }
    k.cholesky().ok_or(QpError::Factorisation)
}

fn project(z: &mut DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(l[i], u[i]);
    }
}

/// Solves the problem from a cold start.
pub fn solve_qp(prob: &QpProblem, settings: &SolverSettings) -> Result<QpSolution, QpError> {
    solve_qp_warm(prob, settings, None)
}

/// Solves the problem, optionally warm-started from a primal-dual pair.
pub fn solve_qp_warm(prob: &QpProblem, settings: &SolverSettings, warm: Option<(&DVector<f64>, &DVector<f64>)>) -> Result<QpSolution, QpError> {
    prob.validate()?;
    let n = prob.num_vars();
    let m = prob.num_rows();
    let s = ruiz(prob, settings.scaling_iters);

    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    if let Some((x0, y0)) = warm {
        if x0.len() == n && y0.len() == m {
            x = x0.component_div(&s.d);
            y = y0.component_div(&s.e) * s.c;
        }
    }
    let mut z = &s.a * &x;
    project(&mut z, &s.l, &s.u);

    let mut rho = settings.rho;
    let mut rho_vec = rho_vector(&s.l, &s.u, rho);
    let mut chol = factor(&s, settings.sigma, &rho_vec)?;

    let unscale_prim = |v: &DVector<f64>| inf_norm(&v.component_div(&s.e));
    let unscale_dual = |v: &DVector<f64>| inf_norm(&v.component_div(&s.d)) / s.c;

    let mut status = SolveStatus::MaxIterations;
    let mut iterations = settings.max_iter;
    let mut y_prev = y.clone();
    let mut x_prev = x.clone();
    let alpha = settings.alpha;
    let mut last_polished: Option<Vec<(usize, Active)>> = None;
    let mut prev_guess: Option<Vec<(usize, Active)>> = None;

    let mut rz = DVector::zeros(m);
    let mut x_tilde = DVector::zeros(n);
    let mut z_tilde = DVector::zeros(m);
    for iter in 1..=settings.max_iter {
        y_prev.copy_from(&y);
        x_prev.copy_from(&x);
        for i in 0..m {
            rz[i] = z[i] * rho_vec[i] - y[i];
        }
        for j in 0..n {
            x_tilde[j] = settings.sigma * x[j] - s.q[j];
        }
        x_tilde.gemv(1.0, &s.at, &rz, 1.0);
        chol.solve_mut(&mut x_tilde);
        z_tilde.gemv(1.0, &s.a, &x_tilde, 0.0);
        x.axpy(alpha, &x_tilde, 1.0 - alpha);
        for i in 0..m {
            let relaxed = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let z_new = (relaxed + y[i] / rho_vec[i]).clamp(s.l[i], s.u[i]);
            y[i] += rho_vec[i] * (relaxed - z_new);
            z[i] = z_new;
        }

        if iter % settings.check_interval != 0 && iter != settings.max_iter {
            continue;
        }

        let ax = &s.a * &x;
        let px = &s.p * &x;
        let aty = &s.at * &y;
        let r_prim = unscale_prim(&(&ax - &z));
        let r_dual = unscale_dual(&(&px + &s.q + &aty));
        let prim_scale = unscale_prim(&ax).max(unscale_prim(&z));
        let dual_scale = unscale_dual(&px).max(unscale_dual(&aty)).max(unscale_dual(&s.q));
        let eps_prim = settings.eps_abs + settings.eps_rel * prim_scale;
        let eps_dual = settings.eps_abs + settings.eps_rel * dual_scale;

        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = SolveStatus::Solved;
            iterations = iter;
            break;
        }

        // polish once the active-set guess has held for a whole check interval
        let guess = if settings.polish { Some(guess_active(prob, &s, &z, &y)) } else { None };
        let steady = guess.is_some() && guess == prev_guess;
        prev_guess = guess;
        if let Some(active) = prev_guess.as_ref().filter(|a| steady && last_polished.as_ref() != Some(*a)) {
            let attempt = polish_active(prob, active);
            last_polished = Some(active.clone());
            if let Some((xp, yp)) = attempt {
                let kp = kkt_residuals(prob, &xp, &yp);
                if kp.max() <= settings.eps_abs {
                    return Ok(QpSolution {
                        objective: prob.objective(&xp),
                        x: xp,
                        y: yp,
                        status: SolveStatus::Solved,
                        iterations: iter,
                        kkt: kp,
                        polished: true,
                    });
                }
            }
        }

        if m > 0 && primal_infeasible(&s, &(&y - &y_prev), settings.eps_prim_inf) {
            status = SolveStatus::PrimalInfeasible;
            iterations = iter;
            break;
        }
        if dual_infeasible(&s, &(&x - &x_prev), settings.eps_dual_inf) {
            status = SolveStatus::DualInfeasible;
            iterations = iter;
            break;
        }

        if settings.adaptive_rho {
            let prim_ratio = r_prim / prim_scale.max(1e-10);
            let dual_ratio = r_dual / dual_scale.max(1e-10);
            let proposed = (rho * (prim_ratio / dual_ratio.max(1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if proposed.is_finite() && (proposed > 5.0 * rho || proposed < rho / 5.0) {
                rho = proposed;
                rho_vec = rho_vector(&s.l, &s.u, rho);
                chol = factor(&s, settings.sigma, &rho_vec)?;
            }
        }
    }

    let (mut xs, mut ys) = unscale(&s, &x, &y);
    let mut polished = false;
    if status == SolveStatus::Solved && settings.polish {
        if let Some((xp, yp)) = polish(prob, &s, &z, &y) {
            let before = kkt_residuals(prob, &xs, &ys);
            let after = kkt_residuals(prob, &xp, &yp);
            if after.max() <= before.max() {
                xs = xp;
                ys = yp;
                polished = true;
            }
        }
    }
    let kkt = kkt_residuals(prob, &xs, &ys);
    Ok(QpSolution { objective: prob.objective(&xs), x: xs, y: ys, status, iterations, kkt, polished })
}

fn unscale(s: &Scaled, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    (x.component_mul(&s.d), y.component_mul(&s.e) / s.c)
}

fn primal_infeasible(s: &Scaled, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = inf_norm(&dy.component_mul(&s.e));
    if norm < 1e-12 {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let d = dy[i];
        if d > 0.0 {
            if s.u[i].is_finite() {
                support += s.u[i] * d;
            } else if d * s.e[i] > eps * norm {
                return false;
            }
        } else if d < 0.0 {
            if s.l[i].is_finite() {
                support += s.l[i] * d;
            } else if -d * s.e[i] > eps * norm {
                return false;
            }
        }
    }
    let aty = (&s.at * dy).component_div(&s.d);
    inf_norm(&aty) <= eps * norm && support < -eps * norm
}

fn dual_infeasible(s: &Scaled, dx: &DVector<f64>, eps: f64) -> bool {
    let norm = inf_norm(&dx.component_mul(&s.d));
    if norm < 1e-12 {
        return false;
    }
    if s.q.dot(dx) / s.c >= -eps * norm {
        return false;
    }
    if inf_norm(&(&s.p * dx).component_div(&s.d)) / s.c > eps * norm {
        return false;
    }
    let adx = &s.a * dx;
    for i in 0..adx.len() {
        let v = adx[i] / s.e[i];
        let upper_ok = s.u[i].is_infinite() || v <= eps * norm;
        let lower_ok = s.l[i].is_infinite() || v >= -eps * norm;
        if !(upper_ok && lower_ok) {
            return false;
        }
    }
    true
}

#[derive(Clone, Copy, PartialEq)]
enum Active {
    Lower,
    Upper,
}

/// Active-set guess from the scaled iterate.
fn guess_active(prob: &QpProblem, s: &Scaled, z: &DVector<f64>, y: &DVector<f64>) -> Vec<(usize, Active)> {
    let mut active = Vec::new();
    for i in 0..prob.num_rows() {
        if prob.lower[i] == prob.upper[i] {
            active.push((i, Active::Lower));
        } else if s.l[i].is_finite() && z[i] - s.l[i] < -y[i] {
            active.push((i, Active::Lower));
        } else if s.u[i].is_finite() && s.u[i] - z[i] < y[i] {
            active.push((i, Active::Upper));
        }
    }
    active
}

fn polish(prob: &QpProblem, s: &Scaled, z: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    polish_active(prob, &guess_active(prob, s, z, y))
}

/// Solves the equality-constrained KKT system implied by `active`.
fn polish_active(prob: &QpProblem, active: &[(usize, Active)]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.num_vars();
    let m = prob.num_rows();
    let k = active.len();
    let delta = 1e-9;
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.hessian);
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -prob.gradient[j];
    }
    for (r, &(i, side)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = prob.constraints[(i, j)];
            kkt[(j, n + r)] = prob.constraints[(i, j)];
        }
        rhs[n + r] = match side {
            Active::Lower => prob.lower[i],
            Active::Upper => prob.upper[i],
        };
    }
    let mut reg = kkt.clone();
    for j in 0..n {
        reg[(j, j)] += delta;
    }
    for r in 0..k {
        reg[(n + r, n + r)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let resid = &rhs - &kkt * &sol;
        let corr = lu.solve(&resid)?;
        sol += corr;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut yv = DVector::zeros(m);
    for (r, &(i, _)) in active.iter().enumerate() {
        yv[i] = sol[n + r];
    }
    Some((x, yv))
}
