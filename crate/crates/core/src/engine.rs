//! Cadenced advisory pipeline for one ego vehicle: lattice estimation and
//! prediction every prediction period, an MPC advisory every advisory
//! period, both counted in whole simulation ticks.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::estimation::{self, EstimationError, EstimatorState, SpeedObservation, UkfConfig};
use crate::prediction::{self, PredictedTrajectory, PredictionError};
use crate::signal::SignalTimeline;
use crate::traffic_flow::{FlowError, FlowParams};
use crate::vehicle::VehicleState;
use crate::warning_mpc::{classify, AdvisorySession, LeadPrediction, MpcConfig, WarningError, WarningOutcome, WarningSignal};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Warning(#[from] WarningError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("prediction from t = {made} s is too old for an advisory at t = {now} s")]
    StalePrediction { made: f64, now: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub flow: FlowParams,
    pub ukf: UkfConfig,
    pub mpc: MpcConfig,
    /// Number of lattice cells ahead of the ego.
    pub window_cells: usize,
    pub prediction_horizon: f64,
    /// Growth rate of the predicted lead-position standard deviation, m/s.
    pub sigma_growth: f64,
    /// Range within which the immediate leader is sensed, m.
    pub lead_range: f64,
    pub tick: f64,
    pub prediction_every_ticks: u64,
    pub advisory_every_ticks: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            flow: FlowParams::default(),
            ukf: UkfConfig::default(),
            mpc: MpcConfig::default(),
            window_cells: 25,
            prediction_horizon: 10.0,
            sigma_growth: 0.3,
            lead_range: 150.0,
            tick: 0.1,
            prediction_every_ticks: 2,
            advisory_every_ticks: 10,
        }
    }
}

/// What the ego can see at one tick: itself, its sensed leader and any
/// connected vehicles reporting over the air.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Observation {
    pub ego: Option<VehicleState>,
    pub lead: Option<VehicleState>,
    pub connected: Vec<VehicleState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSnapshot {
    pub t: f64,
    pub ego: PredictedTrajectory,
    pub lead: Option<LeadPrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TickReport {
    pub prediction_refreshed: bool,
    pub advisory_refreshed: bool,
}

pub struct AdvisoryEngine {
    cfg: EngineConfig,
    estimator: Option<EstimatorState>,
    estimator_t: f64,
    session: AdvisorySession,
    snapshot: Option<PredictionSnapshot>,
    last_outcome: Option<WarningOutcome>,
    tick: u64,
    pub prediction_refreshes: u64,
    pub advisory_refreshes: u64,
    pub clamp_warnings: u64,
}

impl AdvisoryEngine {
    pub fn new(cfg: EngineConfig) -> Self {
        let session = AdvisorySession::new(cfg.mpc.clone());
        Self {
            cfg,
            estimator: None,
            estimator_t: 0.0,
            session,
            snapshot: None,
            last_outcome: None,
            tick: 0,
            prediction_refreshes: 0,
            advisory_refreshes: 0,
            clamp_warnings: 0,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn latest_warning(&self) -> WarningSignal {
        self.session.last_warning().unwrap_or_else(|| classify(0.0))
    }

    pub fn latest_outcome(&self) -> Option<&WarningOutcome> {
        self.last_outcome.as_ref()
    }

    pub fn snapshot(&self) -> Option<&PredictionSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn estimator(&self) -> Option<&EstimatorState> {
        self.estimator.as_ref()
    }

    fn window_origin(&self, ego_position: f64) -> f64 {
        let dx = self.cfg.flow.cell_length;
        (ego_position / dx).floor() * dx
    }

    fn observations(&self, obs: &Observation) -> Vec<SpeedObservation> {
        obs.ego
            .iter()
            .chain(obs.lead.iter())
            .chain(obs.connected.iter())
            .map(|v| SpeedObservation { position: v.position, speed: v.speed })
            .collect()
    }

    fn refresh_prediction(&mut self, t: f64, obs: &Observation, signal: &SignalTimeline) -> Result<(), EngineError> {
        let Some(ego) = obs.ego.as_ref() else { return Ok(()) };
        let p = &self.cfg.flow;
        let n = self.cfg.window_cells;
        let origin = self.window_origin(ego.position);
        let measurements = self.observations(obs);

        let mut est = match self.estimator.take() {
            None => {
                let hi = origin + n as f64 * p.cell_length;
                let count = measurements.iter().filter(|m| m.position >= origin && m.position <= hi).count();
                let mut prior = EstimatorState::prior(n, origin, count, p);
                prior.signal_cell = estimation::signal_cell_for(origin, n, signal.stop_bar_m, p.cell_length);
                self.estimator_t = t;
                prior
            }
            Some(mut est) => {
                let steps = ((t - self.estimator_t) / p.time_step).round() as usize;
                for k in 0..steps {
                    let phase = signal.phase_at(self.estimator_t + k as f64 * p.time_step);
                    let out = estimation::ukf_predict(&est, phase, p, &self.cfg.ukf)?;
                    if out.clamp_warning {
                        self.clamp_warnings += 1;
                    }
                    est = out.state;
                }
                self.estimator_t = t;
                est
            }
        };
        if est.origin != origin {
            est = est.shift_window(origin, Some(signal.stop_bar_m), p);
        }
        est = estimation::ukf_update(&est, &measurements, p.cell_length, &self.cfg.ukf)?;

        let grids = prediction::predict_grid_horizon(&est, signal, p, self.cfg.prediction_horizon, t)?;
        let ego_traj = prediction::predict_vehicle(ego.position, &grids, t, p)?;
        let ego_pred = prediction::trajectory_uncertainty(&est, &ego_traj, self.cfg.sigma_growth, p)?;
        let lead = match obs.lead.as_ref() {
            Some(l) if l.position - ego.position <= self.cfg.lead_range => {
                let traj = prediction::predict_vehicle(l.position, &grids, t, p)?;
                let traj = prediction::trajectory_uncertainty(&est, &traj, self.cfg.sigma_growth, p)?;
                Some(LeadPrediction { traj, length: l.length })
            }
            _ => None,
        };
        self.estimator = Some(est);
        self.snapshot = Some(PredictionSnapshot { t, ego: ego_pred, lead });
        self.prediction_refreshes += 1;
        Ok(())
    }

    fn refresh_advisory(&mut self, t: f64, obs: &Observation, signal: &SignalTimeline) -> Result<(), EngineError> {
        let (Some(ego), Some(snap)) = (obs.ego.as_ref(), self.snapshot.as_ref()) else { return Ok(()) };
        let max_age = self.cfg.prediction_every_ticks as f64 * self.cfg.tick + 1e-9;
        if t - snap.t > max_age {
            return Err(EngineError::StalePrediction { made: snap.t, now: t });
        }
        let outcome = self.session.compute_warning(t, ego, &snap.ego, snap.lead.as_ref(), signal)?;
        if outcome.stale {
            warn!(t, "advisory is stale");
        }
        self.last_outcome = Some(outcome);
        self.advisory_refreshes += 1;
        Ok(())
    }

    /// Runs whatever cadence work is due at this tick. Ticks are counted
    /// from zero; `t` is the simulation time of the tick.
    pub fn on_tick(&mut self, t: f64, obs: &Observation, signal: &SignalTimeline) -> Result<TickReport, EngineError> {
        let mut report = TickReport::default();
        if self.tick % self.cfg.prediction_every_ticks == 0 {
            self.refresh_prediction(t, obs, signal)?;
            report.prediction_refreshed = true;
        }
        if self.tick % self.cfg.advisory_every_ticks == 0 {
            self.refresh_advisory(t, obs, signal)?;
            report.advisory_refreshed = true;
        }
        self.tick += 1;
        Ok(report)
    }
}
