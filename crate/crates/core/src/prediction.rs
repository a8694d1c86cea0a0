//! Lattice roll-outs and per-vehicle trajectory forecasts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::EstimatorState;
use crate::signal::SignalTimeline;
use crate::traffic_flow::{self, CellGrid, FlowError, FlowParams};

#[derive(Debug, Error, PartialEq)]
pub enum PredictionError {
    #[error("horizon {0} s is not a positive multiple of the model step")]
    BadHorizon(f64),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrajectory {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// Position standard deviation in m at each sample.
    pub sigma_x: Vec<f64>,
}

impl PredictedTrajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        *self.t.last().unwrap_or(&f64::NAN)
    }

    /// Linear interpolation of position, speed and sigma at time `t`,
    /// held constant beyond the sampled range.
    pub fn sample(&self, t: f64) -> (f64, f64, f64) {
        let n = self.t.len();
        if t <= self.t[0] {
            return (self.x[0], self.v[0], self.sigma_x[0]);
        }
        if t >= self.t[n - 1] {
            return (self.x[n - 1], self.v[n - 1], self.sigma_x[n - 1]);
        }
        let k = self.t.partition_point(|&s| s <= t) - 1;
        let w = (t - self.t[k]) / (self.t[k + 1] - self.t[k]);
        let lerp = |a: &[f64]| a[k] + w * (a[k + 1] - a[k]);
        (lerp(&self.x), lerp(&self.v), lerp(&self.sigma_x))
    }
}

fn step_count(horizon: f64, dt: f64) -> Result<usize, PredictionError> {
    let k = (horizon / dt).round();
    if !(horizon > 0.0) || (k * dt - horizon).abs() > 1e-9 {
        return Err(PredictionError::BadHorizon(horizon));
    }
    Ok(k as usize)
}

/// Rolls the estimator mean forward without noise. Returns the grid at
/// every model step including the initial one.
pub fn predict_grid_horizon(est: &EstimatorState, signal: &SignalTimeline, p: &FlowParams, horizon: f64, t0: f64) -> Result<Vec<CellGrid>, PredictionError> {
    let k = step_count(horizon, p.time_step)?;
    let mut grids = Vec::with_capacity(k + 1);
    grids.push(est.mean_grid());
    for i in 0..k {
        let phase = signal.phase_at(t0 + i as f64 * p.time_step);
        let next = traffic_flow::step(&grids[i], phase, p, None)?.grid;
        grids.push(next);
    }
    Ok(grids)
}

/// Forward-Euler position forecast using lattice speeds interpolated at
/// the vehicle's own position. Positions past the lattice end hold the
/// last reachable speed.
pub fn predict_vehicle(position: f64, grids: &[CellGrid], t0: f64, p: &FlowParams) -> Result<PredictedTrajectory, PredictionError> {
    let mut traj = PredictedTrajectory { t: Vec::new(), x: Vec::new(), v: Vec::new(), sigma_x: Vec::new() };
    let mut x = position;
    for (k, grid) in grids.iter().enumerate() {
        let hi = grid.origin + grid.num_cells() as f64 * p.cell_length;
        let v = traffic_flow::interpolate_speed(grid, x.min(hi), p.cell_length)?;
        traj.t.push(t0 + k as f64 * p.time_step);
        traj.x.push(x);
        traj.v.push(v);
        traj.sigma_x.push(0.0);
        x += p.time_step * v;
    }
    Ok(traj)
}

/// Position-equivalent standard deviation at the vehicle's cells: the
/// interpolated speed standard deviation accumulated over one second.
pub fn initial_position_sigma(est: &EstimatorState, position: f64, p: &FlowParams) -> Result<f64, PredictionError> {
    let n = est.num_cells();
    let w = traffic_flow::interpolation_weights(&est.mean_grid(), position, p.cell_length)?;
    let mut var = 0.0;
    for (i, wi) in w {
        for (j, wj) in w {
            var += wi * wj * est.covariance[(n + i, n + j)];
        }
    }
    Ok(var.max(0.0).sqrt())
}

/// Attaches an uncertainty band growing linearly with look-ahead time.
pub fn trajectory_uncertainty(est: &EstimatorState, traj: &PredictedTrajectory, growth: f64, p: &FlowParams) -> Result<PredictedTrajectory, PredictionError> {
    let sigma0 = initial_position_sigma(est, traj.x[0], p)?;
    Ok(with_sigma(traj, sigma0, growth))
}

pub fn with_sigma(traj: &PredictedTrajectory, sigma0: f64, growth: f64) -> PredictedTrajectory {
    let t0 = traj.t[0];
    let sigma_x = traj.t.iter().map(|t| sigma0 + growth * (t - t0)).collect();
    PredictedTrajectory { sigma_x, ..traj.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic_flow::Boundary;
    use nalgebra::DMatrix;

    fn free_flow_state(p: &FlowParams) -> EstimatorState {
        let grid = CellGrid::uniform(25, 10.0, p.free_flow_speed, 0.0, Boundary::open());
        EstimatorState::from_grid(&grid, DMatrix::zeros(50, 50))
    }

    fn green() -> SignalTimeline {
        SignalTimeline { stop_bar_m: 400.0, green_s: 100.0, yellow_s: 3.0, red_s: 30.0, offset_s: 0.0 }
    }

    #[test]
    fn free_flow_vehicle_travels_at_free_flow_speed() {
        let p = FlowParams::default();
        let est = free_flow_state(&p);
        let grids = predict_grid_horizon(&est, &green(), &p, 10.0, 0.0).unwrap();
        assert_eq!(grids.len(), 101);
        let traj = predict_vehicle(0.0, &grids, 0.0, &p).unwrap();
        assert!((traj.x[100] - 246.0).abs() < 1e-9);
    }

    #[test]
    fn horizon_must_be_a_step_multiple() {
        let p = FlowParams::default();
        let est = free_flow_state(&p);
        assert!(predict_grid_horizon(&est, &green(), &p, 0.25, 0.0).is_err());
        assert!(predict_grid_horizon(&est, &green(), &p, 0.0, 0.0).is_err());
    }

    #[test]
    fn sigma_grows_linearly() {
        let traj = PredictedTrajectory { t: vec![0.0, 2.0, 4.0], x: vec![0.0; 3], v: vec![0.0; 3], sigma_x: vec![0.0; 3] };
        let s = with_sigma(&traj, 1.0, 0.5);
        assert_eq!(s.sigma_x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_covariance_gives_zero_sigma() {
        let p = FlowParams::default();
        let est = free_flow_state(&p);
        let grids = predict_grid_horizon(&est, &green(), &p, 1.0, 0.0).unwrap();
        let traj = predict_vehicle(30.0, &grids, 0.0, &p).unwrap();
        let s = trajectory_uncertainty(&est, &traj, 0.0, &p).unwrap();
        assert!(s.sigma_x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_interpolates_between_points() {
        let traj = PredictedTrajectory { t: vec![0.0, 1.0], x: vec![0.0, 10.0], v: vec![4.0, 6.0], sigma_x: vec![0.0, 1.0] };
        let (x, v, s) = traj.sample(0.5);
        assert_eq!((x, v, s), (5.0, 5.0, 0.5));
        assert_eq!(traj.sample(3.0).0, 10.0);
    }
}
