//! Exhaustive active-set enumeration for small strictly convex QPs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use redlight_core::qp_core::QpProblem;

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Lower,
    Upper,
    Equal,
}

pub struct OracleSolution {
    pub x: DVector<f64>,
    pub objective: f64,
}

/// Returns the unique minimiser by checking the KKT conditions of every
/// admissible active set. Requires a positive definite Hessian.
pub fn enumerate(p: &QpProblem) -> Option<OracleSolution> {
    let n = p.hessian.ncols();
    let mut eq = Vec::new();
    let mut ineq = Vec::new();
    for i in 0..p.constraints.nrows() {
        if p.lower[i] == p.upper[i] {
            eq.push((i, Side::Equal));
            continue;
        }
        if p.lower[i].is_finite() {
            ineq.push((i, Side::Lower));
        }
        if p.upper[i].is_finite() {
            ineq.push((i, Side::Upper));
        }
    }
    assert!(ineq.len() <= 16, "too many one-sided rows for enumeration");
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1 << ineq.len()) {
        let mut set = eq.clone();
        let mut rows_used = Vec::new();
        let mut ok = true;
        for (b, &(i, side)) in ineq.iter().enumerate() {
            if mask & (1 << b) != 0 {
                if rows_used.contains(&i) {
                    ok = false;
                    break;
                }
                rows_used.push(i);
                set.push((i, side));
            }
        }
        if !ok || set.len() > n {
            continue;
        }
        let k = set.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.hessian);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&p.gradient));
        for (r, &(i, side)) in set.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = p.constraints[(i, j)];
                kkt[(j, n + r)] = p.constraints[(i, j)];
            }
            rhs[n + r] = if side == Side::Upper { p.upper[i] } else { p.lower[i] };
        }
        let svd = kkt.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin <= 1e-10 * smax {
            continue;
        }
        let Ok(sol) = svd.solve(&rhs, 0.0) else { continue };
        let x = sol.rows(0, n).into_owned();
        let ax = &p.constraints * &x;
        let feasible = (0..p.constraints.nrows()).all(|i| {
            let mag = [p.lower[i], p.upper[i]].iter().filter(|b| b.is_finite()).fold(0.0f64, |m, b| m.max(b.abs()));
            let tol = 1e-8 * (1.0 + mag);
            ax[i] >= p.lower[i] - tol && ax[i] <= p.upper[i] + tol
        });
        let dual_ok = set.iter().enumerate().all(|(r, &(_, side))| {
            let y = sol[n + r];
            match side {
                Side::Lower => y <= 1e-9,
                Side::Upper => y >= -1e-9,
                Side::Equal => true,
            }
        });
        if feasible && dual_ok {
            let objective = 0.5 * x.dot(&(&p.hessian * &x)) + p.gradient.dot(&x);
            if best.as_ref().is_none_or(|b| objective < b.objective) {
                best = Some(OracleSolution { x, objective });
            }
        }
    }
    best
}

/// Random strictly convex QP with `n` variables and `m` two-sided rows,
/// feasible by construction around a random interior reference point.
pub fn random_general<R: Rng>(rng: &mut R, n: usize, m: usize) -> QpProblem {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut h = &b * b.transpose();
    for i in 0..n {
        h[(i, i)] += 0.1;
    }
    let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let x_ref = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let ax = &a * &x_ref;
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for i in 0..m {
        let kind = rng.random_range(0..4);
        let lo = ax[i] - rng.random_range(0.0..1.0);
        let hi = ax[i] + rng.random_range(0.0..1.0);
        match kind {
            0 => {
                l[i] = lo;
                u[i] = f64::INFINITY;
            }
            1 => {
                l[i] = f64::NEG_INFINITY;
                u[i] = hi;
            }
            _ => {
                l[i] = lo;
                u[i] = hi;
            }
        }
    }
    QpProblem::new(h, g, a, l, u)
}

/// Random problem with the structure of a condensed longitudinal MPC:
/// inputs act on speed and position through integrator chains, the cost
/// mixes input, input-rate and speed-tracking terms, and rows are drawn
/// from input-box, speed-bound and position-headway families.
pub fn random_condensed<R: Rng>(rng: &mut R) -> QpProblem {
    let n = rng.random_range(2..=8);
    let dt = 0.2;
    let gain = 20.0;
    let w1 = rng.random_range(0.1..2.0);
    let w2 = rng.random_range(0.1..4.0);
    let w3 = rng.random_range(0.001..1.0);
    let v0: f64 = rng.random_range(5.0..25.0);
    // speed and position sensitivities to each input
    let bv = DMatrix::from_fn(n, n, |k, i| if i <= k { -dt / gain } else { 0.0 });
    let bx = DMatrix::from_fn(n, n, |k, i| if i < k { -dt * dt * (k - i) as f64 / gain } else { 0.0 });
    let mut h = DMatrix::identity(n, n) * (2.0 * dt * w1 / (gain * gain));
    for k in 1..n {
        let mut d = DVector::zeros(n);
        d[k] = 1.0 / (gain * dt);
        d[k - 1] = -1.0 / (gain * dt);
        h += &d * d.transpose() * (2.0 * dt * w2);
    }
    h += bv.transpose() * &bv * (2.0 * dt * w3);
    let vref = DVector::from_fn(n, |_, _| rng.random_range(0.0..25.0));
    let g = bv.transpose() * (DVector::from_element(n, v0) - vref) * (2.0 * dt * w3);

    let u_ref = DVector::from_fn(n, |_, _| rng.random_range(-20.0..90.0));
    let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    let budget = rng.random_range(2..=6);
    while rows.len() < budget {
        let k = rng.random_range(0..n);
        match rng.random_range(0..3) {
            0 => {
                let mut r = DVector::zeros(n);
                r[k] = 1.0;
                rows.push((r, -20.0, 90.0));
            }
            1 => {
                let r = bv.row(k).transpose();
                let val = v0 + r.dot(&u_ref);
                rows.push((r, -v0 + val.min(0.0), 30.0 - v0 + (val - 30.0).max(0.0)));
            }
            _ => {
                let tau = 1.0;
                let r = bx.row(k).transpose() + bv.row(k).transpose() * tau;
                let margin = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..5.0) };
                let hi = r.dot(&u_ref) + margin;
                rows.push((r, f64::NEG_INFINITY, hi));
            }
        }
    }
    let m = rows.len();
    let a = DMatrix::from_fn(m, n, |i, j| rows[i].0[j]);
    let l = DVector::from_iterator(m, rows.iter().map(|r| r.1));
    let u = DVector::from_iterator(m, rows.iter().map(|r| r.2));
    QpProblem::new(h, g, a, l, u)
}
