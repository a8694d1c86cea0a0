//! Textbook Kalman update on the speed-observation model, used as the
//! reference for the unscented filter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use redlight_core::estimation::{EstimatorState, SpeedObservation};
use redlight_core::traffic_flow::{Boundary, CellGrid};

pub const DX: f64 = 20.0;

pub fn random_spd<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut m = &b * b.transpose() * scale;
    for i in 0..n {
        m[(i, i)] += 0.05 * scale;
    }
    m
}

pub fn random_state<R: Rng>(rng: &mut R, cells: usize) -> EstimatorState {
    let grid = CellGrid {
        densities: (0..cells).map(|_| rng.random_range(5.0..80.0)).collect(),
        speeds: (0..cells).map(|_| rng.random_range(0.0..24.6)).collect(),
        origin: rng.random_range(-600.0..0.0),
        signal_cell: None,
        boundary: Boundary::open(),
    };
    EstimatorState::from_grid(&grid, random_spd(rng, 2 * cells, 4.0))
}

/// Observation row built straight from the two-node interpolation formula.
pub fn hand_row(est: &EstimatorState, position: f64) -> DVector<f64> {
    let n = est.num_cells();
    let s = (position - est.origin) / DX;
    let j = s.floor() as usize;
    let alpha = s - j as f64;
    let mut row = DVector::zeros(2 * n);
    row[n + j] += 1.0 - alpha;
    row[n + (j + 1).min(n - 1)] += alpha;
    row
}

pub fn kalman(est: &EstimatorState, obs: &[SpeedObservation], r: f64) -> (DVector<f64>, DMatrix<f64>) {
    let dim = est.mean.len();
    let h = DMatrix::from_fn(obs.len(), dim, |i, k| hand_row(est, obs[i].position)[k]);
    let s = &h * &est.covariance * h.transpose() + DMatrix::identity(obs.len(), obs.len()) * r;
    let k = &est.covariance * h.transpose() * s.try_inverse().unwrap();
    let z = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.speed));
    let mean = &est.mean + &k * (z - &h * &est.mean);
    let cov = (DMatrix::identity(dim, dim) - &k * &h) * &est.covariance;
    (mean, cov)
}

pub fn random_observations<R: Rng>(rng: &mut R, est: &EstimatorState) -> Vec<SpeedObservation> {
    let extent = est.num_cells() as f64 * DX;
    (0..rng.random_range(1..5))
        .map(|_| SpeedObservation { position: est.origin + rng.random_range(0.0..extent - 1e-6), speed: rng.random_range(0.0..25.0) })
        .collect()
}

