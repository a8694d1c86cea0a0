//! Second-order macroscopic traffic model on a one-dimensional cell lattice.
//!
//! Densities are carried in veh/km and speeds in m/s. Flux terms convert the
//! density to veh/m before multiplying by speed so that the update is
//! dimensionally consistent; the result is converted back to veh/km.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::Phase;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("invalid flow parameter: {0}")]
    InvalidParameter(String),
    #[error("time step {dt} s violates the CFL bound for cell length {dx} m at {speed} m/s")]
    CflViolation { dt: f64, dx: f64, speed: f64 },
    #[error("position {position} m lies outside the lattice [{lo}, {hi}] m")]
    OutOfRange { position: f64, lo: f64, hi: f64 },
    #[error("grid has {densities} densities but {speeds} speeds")]
    ShapeMismatch { densities: usize, speeds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Free-flow speed v0 in m/s.
    pub free_flow_speed: f64,
    /// Congested-branch wave speed c in m/s.
    pub congested_wave_speed: f64,
    /// Jam density in veh/km.
    pub jam_density: f64,
    /// Speed relaxation time in s.
    pub relaxation_time: f64,
    /// Anticipation (pressure) coefficient c0 in m/s.
    pub pressure_coeff: f64,
    /// Density regulariser in the pressure denominator, veh/km.
    pub regularizer: f64,
    /// Upper clamp for cell speeds in m/s.
    pub max_speed: f64,
    pub cell_length: f64,
    pub time_step: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            free_flow_speed: 24.6,
            congested_wave_speed: 10.14,
            jam_density: 130.0,
            relaxation_time: 1.0,
            pressure_coeff: 6.0,
            regularizer: 1e-3,
            max_speed: 24.6 * 1.25,
            cell_length: 20.0,
            time_step: 0.1,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        let positive = [
            ("free_flow_speed", self.free_flow_speed),
            ("congested_wave_speed", self.congested_wave_speed),
            ("jam_density", self.jam_density),
            ("relaxation_time", self.relaxation_time),
            ("regularizer", self.regularizer),
            ("cell_length", self.cell_length),
            ("time_step", self.time_step),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(FlowError::InvalidParameter(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.pressure_coeff.is_finite() && self.pressure_coeff >= 0.0) {
            return Err(FlowError::InvalidParameter(format!(
                "pressure_coeff must be non-negative, got {}",
                self.pressure_coeff
            )));
        }
        if !(self.max_speed.is_finite() && self.max_speed >= self.free_flow_speed) {
            return Err(FlowError::InvalidParameter(format!(
                "max_speed {} must be at least free_flow_speed {}",
                self.max_speed, self.free_flow_speed
            )));
        }
        if self.max_speed * self.time_step > self.cell_length {
            return Err(FlowError::CflViolation {
                dt: self.time_step,
                dx: self.cell_length,
                speed: self.max_speed,
            });
        }
        Ok(())
    }

    pub fn critical_density(&self) -> f64 {
        critical_density(self.jam_density, self.free_flow_speed, self.congested_wave_speed)
    }

    pub fn equilibrium_speed(&self, density: f64) -> f64 {
        equilibrium_speed(density, self.jam_density, self.free_flow_speed, self.congested_wave_speed)
    }
}

/// Density at which the free-flow and congested branches of the triangular
/// fundamental diagram meet.
pub fn critical_density(jam_density: f64, free_flow_speed: f64, wave_speed: f64) -> f64 {
    jam_density / (free_flow_speed / wave_speed + 1.0)
}

/// Triangular equilibrium speed-density relation.
pub fn equilibrium_speed(density: f64, jam_density: f64, free_flow_speed: f64, wave_speed: f64) -> f64 {
    let rho_c = critical_density(jam_density, free_flow_speed, wave_speed);
    if density <= rho_c {
        free_flow_speed
    } else {
        wave_speed * (jam_density / density - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Boundary {
    /// Ghost cells copy the edge cells; an optional upstream density overrides
    /// the upstream ghost (its speed is then the equilibrium speed).
    Open { inflow_density: Option<f64> },
    /// Ring road: cell 0 follows the last cell.
    #[default]
    Periodic,
}

impl Boundary {
    pub fn open() -> Self {
        Boundary::Open { inflow_density: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    pub densities: Vec<f64>,
    pub speeds: Vec<f64>,
    /// Position of the upstream edge of cell 0, in m.
    pub origin: f64,
    /// Cell containing the stop bar, if it lies on the lattice.
    pub signal_cell: Option<usize>,
    pub boundary: Boundary,
}

impl CellGrid {
    pub fn uniform(num_cells: usize, density: f64, speed: f64, origin: f64, boundary: Boundary) -> Self {
        Self {
            densities: vec![density; num_cells],
            speeds: vec![speed; num_cells],
            origin,
            signal_cell: None,
            boundary,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.densities.len()
    }

    /// Total vehicles on the lattice.
    pub fn mass(&self, cell_length: f64) -> f64 {
        self.densities.iter().sum::<f64>() * cell_length / 1000.0
    }

    fn check_shape(&self) -> Result<(), FlowError> {
        if self.densities.len() != self.speeds.len() || self.densities.is_empty() {
            return Err(FlowError::ShapeMismatch { densities: self.densities.len(), speeds: self.speeds.len() });
        }
        Ok(())
    }
}

/// Additive per-cell perturbations applied after the deterministic update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub density: Vec<f64>,
    pub speed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub grid: CellGrid,
    /// Number of cell values that had to be clamped into the physical range.
    pub clamp_events: usize,
}

struct Ghosts {
    up_density: f64,
    up_speed: f64,
    down_density: f64,
}

fn ghosts(grid: &CellGrid, p: &FlowParams) -> Ghosts {
    let n = grid.num_cells();
    match grid.boundary {
        Boundary::Periodic => Ghosts {
            up_density: grid.densities[n - 1],
            up_speed: grid.speeds[n - 1],
            down_density: grid.densities[0],
        },
        Boundary::Open { inflow_density } => {
            let (up_density, up_speed) = match inflow_density {
                Some(rho) => (rho, p.equilibrium_speed(rho)),
                None => (grid.densities[0], grid.speeds[0]),
            };
            Ghosts { up_density, up_speed, down_density: grid.densities[n - 1] }
        }
    }
}

/// Advances the lattice by one time step.
pub fn step(grid: &CellGrid, phase: Phase, p: &FlowParams, noise: Option<&StepNoise>) -> Result<StepResult, FlowError> {
    grid.check_shape()?;
    let n = grid.num_cells();
    if let Some(w) = noise {
        if w.density.len() != n || w.speed.len() != n {
            return Err(FlowError::ShapeMismatch { densities: w.density.len(), speeds: w.speed.len() });
        }
    }
    let g = ghosts(grid, p);
    let r = p.time_step / p.cell_length;
    let c0_sq = p.pressure_coeff * p.pressure_coeff;

    let mut densities = Vec::with_capacity(n);
    let mut speeds = Vec::with_capacity(n);
    let mut clamp_events = 0;

    for j in 0..n {
        let rho = grid.densities[j];
        let v = grid.speeds[j];
        let (rho_up, v_up) = if j == 0 { (g.up_density, g.up_speed) } else { (grid.densities[j - 1], grid.speeds[j - 1]) };
        let rho_down = if j + 1 == n { g.down_density } else { grid.densities[j + 1] };

        let flux = rho / 1000.0 * v;
        let flux_up = rho_up / 1000.0 * v_up;
        let mut rho_next = rho - r * (flux - flux_up) * 1000.0;

        let convection = r * v * (v - v_up);
        let relaxation = p.time_step * (p.equilibrium_speed(rho) - v) / p.relaxation_time;
        let pressure = r * c0_sq * (rho_down - rho) / (rho + p.regularizer);
        let mut v_next = v - convection + relaxation - pressure;

        if let Some(w) = noise {
            rho_next += w.density[j];
            v_next += w.speed[j];
        }
        if phase == Phase::Red && grid.signal_cell == Some(j) {
            v_next = 0.0;
        }

        let rho_clamped = rho_next.clamp(0.0, p.jam_density);
        let v_clamped = v_next.clamp(0.0, p.max_speed);
        if rho_clamped != rho_next || rho_next.is_nan() {
            clamp_events += 1;
        }
        if v_clamped != v_next || v_next.is_nan() {
            clamp_events += 1;
        }
        densities.push(if rho_next.is_nan() { 0.0 } else { rho_clamped });
        speeds.push(if v_next.is_nan() { 0.0 } else { v_clamped });
    }

    Ok(StepResult {
        grid: CellGrid { densities, speeds, origin: grid.origin, signal_cell: grid.signal_cell, boundary: grid.boundary },
        clamp_events,
    })
}

/// Cell index and fractional offset of `position` on the lattice.
pub fn locate(grid: &CellGrid, position: f64, cell_length: f64) -> Result<(usize, f64), FlowError> {
    let n = grid.num_cells();
    let hi = grid.origin + n as f64 * cell_length;
    if !position.is_finite() || position < grid.origin || position > hi {
        return Err(FlowError::OutOfRange { position, lo: grid.origin, hi });
    }
    let s = (position - grid.origin) / cell_length;
    let j = (s.floor() as usize).min(n);
    Ok((j, s - j as f64))
}

/// Interpolation weights `(cell, weight)` for the speed at `position`.
pub fn interpolation_weights(grid: &CellGrid, position: f64, cell_length: f64) -> Result<[(usize, f64); 2], FlowError> {
    let n = grid.num_cells();
    let (j, alpha) = locate(grid, position, cell_length)?;
    let wrap = matches!(grid.boundary, Boundary::Periodic);
    let index = |k: usize| if k < n { k } else if wrap { k % n } else { n - 1 };
    Ok([(index(j), 1.0 - alpha), (index(j + 1), alpha)])
}

/// Speed at an arbitrary position, linearly interpolated between cell nodes.
pub fn interpolate_speed(grid: &CellGrid, position: f64, cell_length: f64) -> Result<f64, FlowError> {
    let w = interpolation_weights(grid, position, cell_length)?;
    Ok(w[0].1 * grid.speeds[w[0].0] + w[1].1 * grid.speeds[w[1].0])
}
