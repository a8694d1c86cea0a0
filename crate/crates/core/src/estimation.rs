//! Unscented Kalman filter over the cell lattice.
//!
//! The state vector stacks all cell densities followed by all cell speeds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::signal::Phase;
use crate::traffic_flow::{self, Boundary, CellGrid, FlowError, FlowParams};

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("covariance is not positive semidefinite even after jitter")]
    NotPositiveSemidefinite,
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("state has dimension {0}, expected an even number")]
    BadDimension(usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UkfConfig {
    /// Sigma-point spread.
    pub alpha: f64,
    /// Prior-distribution weight (2 is optimal for Gaussians).
    pub beta: f64,
    pub kappa: f64,
    /// Per-step additive process variance for densities, (veh/km)^2.
    pub density_process_var: f64,
    /// Per-step additive process variance for speeds, (m/s)^2.
    pub speed_process_var: f64,
    /// Speed measurement variance, (m/s)^2.
    pub speed_measurement_var: f64,
    /// Fraction of clamped sigma-point values above which a warning is raised.
    pub clamp_warning_fraction: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            kappa: 0.0,
            density_process_var: 1.0,
            speed_process_var: 0.05,
            speed_measurement_var: 0.25,
            clamp_warning_fraction: 0.5,
        }
    }
}

pub const JITTER_LADDER: [f64; 3] = [1e-9, 1e-8, 1e-7];
pub const PRIOR_DENSITY_VAR: f64 = 100.0;
pub const PRIOR_SPEED_VAR: f64 = 25.0;
pub const MIN_PRIOR_DENSITY: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub origin: f64,
    pub signal_cell: Option<usize>,
    pub boundary: Boundary,
}

impl EstimatorState {
    pub fn from_grid(grid: &CellGrid, covariance: DMatrix<f64>) -> Self {
        let mut mean = grid.densities.clone();
        mean.extend_from_slice(&grid.speeds);
        Self {
            mean: DVector::from_vec(mean),
            covariance,
            origin: grid.origin,
            signal_cell: grid.signal_cell,
            boundary: grid.boundary,
        }
    }

    /// Uninformed prior: density from the observed vehicle count (floored),
    /// free-flow speed, broad diagonal covariance.
    pub fn prior(num_cells: usize, origin: f64, observed_vehicles: usize, p: &FlowParams) -> Self {
        let length_km = num_cells as f64 * p.cell_length / 1000.0;
        let density = (observed_vehicles as f64 / length_km).max(MIN_PRIOR_DENSITY);
        let grid = CellGrid::uniform(num_cells, density, p.free_flow_speed, origin, Boundary::open());
        let mut diag = vec![PRIOR_DENSITY_VAR; num_cells];
        diag.extend(std::iter::repeat_n(PRIOR_SPEED_VAR, num_cells));
        Self::from_grid(&grid, DMatrix::from_diagonal(&DVector::from_vec(diag)))
    }

    pub fn num_cells(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn grid_of(&self, x: &DVector<f64>) -> CellGrid {
        let n = self.num_cells();
        CellGrid {
            densities: x.rows(0, n).iter().copied().collect(),
            speeds: x.rows(n, n).iter().copied().collect(),
            origin: self.origin,
            signal_cell: self.signal_cell,
            boundary: self.boundary,
        }
    }

    pub fn mean_grid(&self) -> CellGrid {
        self.grid_of(&self.mean)
    }

    /// Moves the lattice downstream by whole cells so that it starts at
    /// `new_origin`. Cells leaving upstream are dropped; entering cells copy
    /// the most downstream estimate and receive the prior variance.
    pub fn shift_window(&self, new_origin: f64, stop_bar: Option<f64>, p: &FlowParams) -> Self {
        let n = self.num_cells();
        let shift = ((new_origin - self.origin) / p.cell_length).round();
        let signal_cell = stop_bar.and_then(|x| signal_cell_for(new_origin, n, x, p.cell_length));
        if shift <= 0.0 && shift > -0.5 {
            return Self { signal_cell, ..self.clone() };
        }
        if shift < 0.0 || shift as usize >= n {
            let mut fresh = Self::prior(n, new_origin, 0, p);
            for j in 0..n {
                fresh.mean[j] = self.mean[n - 1];
                fresh.mean[n + j] = self.mean[2 * n - 1];
            }
            fresh.signal_cell = signal_cell;
            fresh.boundary = self.boundary;
            return fresh;
        }
        let m = shift as usize;
        let old_index = |k: usize| -> Option<usize> {
            // k indexes the new state vector
            let (block, j) = if k < n { (0, k) } else { (n, k - n) };
            let src = j + m;
            (src < n).then_some(block + src)
        };
        let mut mean = DVector::zeros(2 * n);
        let mut cov = DMatrix::zeros(2 * n, 2 * n);
        for k in 0..2 * n {
            match old_index(k) {
                Some(src) => mean[k] = self.mean[src],
                None => {
                    mean[k] = if k < n { self.mean[n - 1] } else { self.mean[2 * n - 1] };
                    cov[(k, k)] = if k < n { PRIOR_DENSITY_VAR } else { PRIOR_SPEED_VAR };
                }
            }
        }
        for a in 0..2 * n {
            let Some(sa) = old_index(a) else { continue };
            for b in 0..2 * n {
                if let Some(sb) = old_index(b) {
                    cov[(a, b)] = self.covariance[(sa, sb)];
                }
            }
        }
        Self { mean, covariance: cov, origin: new_origin, signal_cell, boundary: self.boundary }
    }
}

pub fn signal_cell_for(origin: f64, num_cells: usize, stop_bar: f64, cell_length: f64) -> Option<usize> {
    let s = (stop_bar - origin) / cell_length;
    (s >= 0.0 && s < num_cells as f64).then(|| s.floor() as usize)
}

/// Lower-triangular factor `L` with `L L^T = m` for a symmetric positive
/// semidefinite matrix. Zero pivots produce zero columns.
pub fn psd_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-13 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return None;
        }
        if d <= tol {
            for i in j + 1..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > 1e-6 * scale {
                    return None;
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

fn factor_with_jitter(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, EstimationError> {
    let sym = (cov + cov.transpose()) * 0.5;
    if let Some(l) = psd_cholesky(&sym) {
        return Ok(l);
    }
    for jitter in JITTER_LADDER {
        let mut m = sym.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(l) = psd_cholesky(&m) {
            warn!(jitter, "covariance needed diagonal jitter");
            return Ok(l);
        }
    }
    Err(EstimationError::NotPositiveSemidefinite)
}

/// Scaled symmetric sigma-point set for the current belief.
pub fn generate_sigma_points(est: &EstimatorState, cfg: &UkfConfig) -> Result<SigmaPoints, EstimationError> {
    let n = est.mean.len();
    if n == 0 || n % 2 != 0 {
        return Err(EstimationError::BadDimension(n));
    }
    let nf = n as f64;
    let lambda = cfg.alpha * cfg.alpha * (nf + cfg.kappa) - nf;
    let spread = (nf + lambda).sqrt();
    let l = factor_with_jitter(&est.covariance)?;

    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(est.mean.clone());
    for i in 0..n {
        points.push(&est.mean + l.column(i) * spread);
    }
    for i in 0..n {
        points.push(&est.mean - l.column(i) * spread);
    }
    let w = 1.0 / (2.0 * (nf + lambda));
    let mut mean_weights = vec![w; 2 * n + 1];
    let mut cov_weights = vec![w; 2 * n + 1];
    mean_weights[0] = lambda / (nf + lambda);
    cov_weights[0] = mean_weights[0] + 1.0 - cfg.alpha * cfg.alpha + cfg.beta;
    Ok(SigmaPoints { points, mean_weights, cov_weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutcome {
    pub state: EstimatorState,
    /// Fraction of propagated sigma-point values that hit a physical bound.
    pub clamp_fraction: f64,
    pub clamp_warning: bool,
}

/// Weighted mean accumulated as offsets from the central point, which keeps
/// it exact when all points coincide.
fn weighted_mean(points: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let centre = &points[0];
    let mut m = centre.clone();
    for (p, wi) in points.iter().zip(w).skip(1) {
        m.axpy(*wi, &(p - centre), 1.0);
    }
    m
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Propagates the belief one model step.
pub fn ukf_predict(est: &EstimatorState, phase: Phase, p: &FlowParams, cfg: &UkfConfig) -> Result<PredictOutcome, EstimationError> {
    let sigma = generate_sigma_points(est, cfg)?;
    let n = est.num_cells();
    let mut clamps = 0usize;
    let mut propagated = Vec::with_capacity(sigma.points.len());
    for x in &sigma.points {
        let out = traffic_flow::step(&est.grid_of(x), phase, p, None)?;
        clamps += out.clamp_events;
        let mut v = out.grid.densities;
        v.extend_from_slice(&out.grid.speeds);
        propagated.push(DVector::from_vec(v));
    }
    let mut mean = weighted_mean(&propagated, &sigma.mean_weights);
    let mut cov = DMatrix::zeros(2 * n, 2 * n);
    for (y, w) in propagated.iter().zip(&sigma.cov_weights) {
        let d = y - &mean;
        cov.ger(*w, &d, &d, 1.0);
    }
    for j in 0..n {
        cov[(j, j)] += cfg.density_process_var;
        cov[(n + j, n + j)] += cfg.speed_process_var;
        mean[j] = mean[j].clamp(0.0, p.jam_density);
        mean[n + j] = mean[n + j].clamp(0.0, p.max_speed);
    }
    symmetrize(&mut cov);
    let clamp_fraction = clamps as f64 / (propagated.len() * 2 * n) as f64;
    let clamp_warning = clamp_fraction > cfg.clamp_warning_fraction;
    if clamp_warning {
        warn!(clamp_fraction, "most propagated sigma-point values were clamped");
    }
    Ok(PredictOutcome {
        state: EstimatorState { mean, covariance: cov, ..est.clone() },
        clamp_fraction,
        clamp_warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedObservation {
    pub position: f64,
    pub speed: f64,
}

/// Linear map from the state to the interpolated speeds at the observed
/// positions. Observations off the lattice are dropped.
pub fn observation_matrix(est: &EstimatorState, observations: &[SpeedObservation], cell_length: f64) -> (DMatrix<f64>, Vec<SpeedObservation>) {
    let n = est.num_cells();
    let grid = est.mean_grid();
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    for obs in observations {
        if let Ok(w) = traffic_flow::interpolation_weights(&grid, obs.position, cell_length) {
            let mut row = vec![0.0; 2 * n];
            for (j, wj) in w {
                row[n + j] += wj;
            }
            rows.push(row);
            kept.push(*obs);
        }
    }
    let h = DMatrix::from_fn(rows.len(), 2 * n, |i, k| rows[i][k]);
    (h, kept)
}

/// Corrects the belief with vehicle speed observations.
pub fn ukf_update(est: &EstimatorState, observations: &[SpeedObservation], cell_length: f64, cfg: &UkfConfig) -> Result<EstimatorState, EstimationError> {
    let (h, kept) = observation_matrix(est, observations, cell_length);
    let m = kept.len();
    if m == 0 {
        return Ok(est.clone());
    }
    let sigma = generate_sigma_points(est, cfg)?;
    let projected: Vec<DVector<f64>> = sigma.points.iter().map(|x| &h * x).collect();
    let z_hat = weighted_mean(&projected, &sigma.mean_weights);
    let x_hat = weighted_mean(&sigma.points, &sigma.mean_weights);
    let dim = est.mean.len();
    let mut s = DMatrix::zeros(m, m);
    let mut c = DMatrix::zeros(dim, m);
    for ((x, z), w) in sigma.points.iter().zip(&projected).zip(&sigma.cov_weights) {
        let dz = z - &z_hat;
        let dx = x - &x_hat;
        s.ger(*w, &dz, &dz, 1.0);
        c.ger(*w, &dx, &dz, 1.0);
    }
    for i in 0..m {
        s[(i, i)] += cfg.speed_measurement_var;
    }
    symmetrize(&mut s);
    let chol = s.clone().cholesky().ok_or(EstimationError::SingularInnovation)?;
    let z = DVector::from_iterator(m, kept.iter().map(|o| o.speed));
    let gain = chol.solve(&c.transpose()).transpose();
    let mean = &est.mean + &gain * (z - z_hat);
    let mut cov = &est.covariance - &gain * &s * gain.transpose();
    symmetrize(&mut cov);
    Ok(EstimatorState { mean, covariance: cov, ..est.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize, density: f64, speed: f64, var: f64) -> EstimatorState {
        let grid = CellGrid::uniform(n, density, speed, 0.0, Boundary::open());
        EstimatorState::from_grid(&grid, DMatrix::identity(2 * n, 2 * n) * var)
    }

    #[test]
    fn zero_covariance_collapses_sigma_points() {
        let est = state(4, 20.0, 15.0, 0.0);
        let sp = generate_sigma_points(&est, &UkfConfig::default()).unwrap();
        assert_eq!(sp.points.len(), 17);
        for p in &sp.points {
            assert_eq!(p, &est.mean);
        }
    }

    #[test]
    fn one_dimensional_spread() {
        let cfg = UkfConfig { alpha: 1.0, kappa: 0.0, ..UkfConfig::default() };
        let est = EstimatorState {
            mean: DVector::from_vec(vec![3.0, 1.0]),
            covariance: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.0])),
            origin: 0.0,
            signal_cell: None,
            boundary: Boundary::open(),
        };
        let sp = generate_sigma_points(&est, &cfg).unwrap();
        let k = 2f64.sqrt();
        assert!((sp.points[1][0] - (3.0 + 2.0 * k)).abs() < 1e-12);
        assert!((sp.points[3][0] - (3.0 - 2.0 * k)).abs() < 1e-12);
    }

    #[test]
    fn weighted_sigma_statistics_recover_belief() {
        let mut est = state(5, 30.0, 12.0, 2.0);
        est.covariance[(0, 6)] = 0.5;
        est.covariance[(6, 0)] = 0.5;
        for cfg in [UkfConfig::default(), UkfConfig { alpha: 1e-3, ..UkfConfig::default() }] {
            let sp = generate_sigma_points(&est, &cfg).unwrap();
            let mean = weighted_mean(&sp.points, &sp.mean_weights);
            let mut cov = DMatrix::zeros(10, 10);
            for (p, w) in sp.points.iter().zip(&sp.cov_weights) {
                let d = p - &mean;
                cov.ger(*w, &d, &d, 1.0);
            }
            assert!((mean - &est.mean).amax() < 1e-8);
            assert!((cov - &est.covariance).amax() < 1e-9);
        }
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let mut est = state(2, 20.0, 10.0, 1.0);
        est.covariance[(0, 0)] = -1.0;
        assert_eq!(generate_sigma_points(&est, &UkfConfig::default()), Err(EstimationError::NotPositiveSemidefinite));
    }

    #[test]
    fn noiseless_observation_at_node_pins_speed() {
        let est = state(6, 20.0, 15.0, 4.0);
        let cfg = UkfConfig { speed_measurement_var: 0.0, ..UkfConfig::default() };
        let post = ukf_update(&est, &[SpeedObservation { position: 40.0, speed: 11.0 }], 20.0, &cfg).unwrap();
        assert!((post.mean[6 + 2] - 11.0).abs() < 1e-9);
        assert!(post.covariance[(8, 8)].abs() < 1e-9);
    }

    #[test]
    fn window_shift_keeps_overlapping_block() {
        let p = FlowParams::default();
        let mut est = state(4, 20.0, 15.0, 1.0);
        for j in 0..4 {
            est.mean[j] = 10.0 + j as f64;
            est.mean[4 + j] = 20.0 + j as f64;
        }
        est.covariance[(1, 5)] = 0.3;
        est.covariance[(5, 1)] = 0.3;
        let shifted = est.shift_window(20.0, Some(70.0), &p);
        assert_eq!(shifted.origin, 20.0);
        assert_eq!(shifted.mean[0], 11.0);
        assert_eq!(shifted.mean[3], 13.0);
        assert_eq!(shifted.mean[4], 21.0);
        assert_eq!(shifted.covariance[(0, 4)], 0.3);
        assert_eq!(shifted.covariance[(3, 3)], PRIOR_DENSITY_VAR);
        assert_eq!(shifted.signal_cell, Some(2));
    }

    #[test]
    fn prior_floors_density() {
        let p = FlowParams::default();
        let est = EstimatorState::prior(25, 0.0, 1, &p);
        assert_eq!(est.mean[0], MIN_PRIOR_DENSITY);
        let busy = EstimatorState::prior(25, 0.0, 10, &p);
        assert!((busy.mean[0] - 20.0).abs() < 1e-12);
        assert_eq!(busy.mean[25], p.free_flow_speed);
    }
}
