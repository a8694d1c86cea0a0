//! One driver-in-the-loop episode: a simulated world whose ego follows the
//! human pedals while the advisory engine runs on its usual cadences.

use crate::protocol::{Frame, PedalView, PlanPoint, VehicleView, MAX_PACE, MIN_PACE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use redlight_core::engine::{AdvisoryEngine, EngineConfig, TickReport};
use redlight_core::sim::{observation, ScenarioConfig, ScenarioId, World, SIM_DT};
use redlight_core::warning_mpc::MpcConfig;
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("pace {0} outside [{MIN_PACE}, {MAX_PACE}]")]
    Pace(f64),
    #[error("pedal input must be finite")]
    Pedal,
}

/// Throttle and brake fractions, each clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pedal {
    pub throttle: f64,
    pub brake: f64,
}

impl Pedal {
    pub fn new(throttle: f64, brake: f64) -> Result<Self, SessionError> {
        if !throttle.is_finite() || !brake.is_finite() {
            return Err(SessionError::Pedal);
        }
        Ok(Self { throttle: throttle.clamp(0.0, 1.0), brake: brake.clamp(0.0, 1.0) })
    }

    /// Linear map onto [a_min, a_max]. Any brake pressure overrides the throttle.
    pub fn accel(&self, mpc: &MpcConfig) -> f64 {
        if self.brake > 0.0 {
            mpc.a_min * self.brake
        } else {
            mpc.a_max * self.throttle
        }
    }
}

pub struct Session {
    scenario: ScenarioConfig,
    world: World,
    engine: AdvisoryEngine,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    pedal: Pedal,
    paused: bool,
    pace: f64,
    episode: u32,
    seq: u64,
    stale: bool,
    red_violation: bool,
    last_report: TickReport,
}

impl Session {
    /// `seed` only drives the observation noise; the geometry is the
    /// canonical one for the scenario.
    pub fn open(scenario: &str, seed: u64, pace: f64) -> Result<Self, SessionError> {
        let id = ScenarioId::parse(scenario).ok_or_else(|| SessionError::UnknownScenario(scenario.to_string()))?;
        if !(MIN_PACE..=MAX_PACE).contains(&pace) {
            return Err(SessionError::Pace(pace));
        }
        let mut cfg = ScenarioConfig::canonical(id);
        cfg.rng_seed = seed;
        Ok(Self::start(cfg, pace, 0))
    }

    fn start(scenario: ScenarioConfig, pace: f64, episode: u32) -> Self {
        let noise = Normal::new(0.0, scenario.observation_noise_mps.max(0.0)).expect("non-negative deviation");
        Self {
            world: World::from_config(&scenario),
            engine: AdvisoryEngine::new(EngineConfig::default()),
            rng: ChaCha8Rng::seed_from_u64(scenario.rng_seed),
            noise,
            scenario,
            pedal: Pedal::default(),
            paused: false,
            pace,
            episode,
            seq: 0,
            stale: false,
            red_violation: false,
            last_report: TickReport::default(),
        }
    }

    /// Back to t = 0 with the same scenario and seed. The frame counter keeps
    /// running so the stream stays ordered.
    pub fn reset(&mut self) {
        let seq = self.seq;
        *self = Self::start(self.scenario.clone(), self.pace, self.episode + 1);
        self.seq = seq;
    }

    pub fn set_pedal(&mut self, pedal: Pedal) {
        self.pedal = pedal;
    }

    pub fn set_paused(&mut self, paused: bool) {
        self.paused = paused;
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn pace(&self) -> f64 {
        self.pace
    }

    pub fn t(&self) -> f64 {
        self.world.t
    }

    pub fn engine(&self) -> &AdvisoryEngine {
        &self.engine
    }

    pub fn last_report(&self) -> TickReport {
        self.last_report
    }

    /// Advances the world by one tick (unless paused) and returns the frame
    /// describing the new state.
    pub fn tick(&mut self) -> Frame {
        if !self.paused {
            self.advance();
        }
        self.frame()
    }

    fn advance(&mut self) {
        let t = self.world.t;
        let (rng, noise) = (&mut self.rng, &self.noise);
        let sigma = self.scenario.observation_noise_mps;
        let mut draw = || if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        let obs = observation(&self.world, &mut draw);
        match self.engine.on_tick(t, &obs, &self.world.signal) {
            Ok(report) => {
                self.last_report = report;
                if report.advisory_refreshed {
                    self.stale = self.engine.latest_outcome().is_some_and(|o| o.stale);
                }
            }
            Err(e) => {
                warn!(t, error = %e, "advisory engine failed");
                self.last_report = TickReport::default();
                self.stale = true;
            }
        }
        let accel = self.pedal.accel(&self.engine.config().mpc);
        self.red_violation |= self.world.step(Some(accel), false).ego_red_violation;
    }

    /// Snapshot of the current state, consuming one sequence number.
    pub fn frame(&mut self) -> Frame {
        let seq = self.seq;
        self.seq += 1;
        let world = &self.world;
        let vehicles = world
            .vehicles
            .iter()
            .map(|v| VehicleView { id: v.id, x_m: v.position, v_mps: v.speed, a_mps2: v.accel, length_m: v.length, ego: v.is_ego })
            .collect();
        let plan = self
            .engine
            .latest_outcome()
            .map(|o| {
                let p = &o.plan;
                p.t.iter().zip(&p.x).zip(&p.v).map(|((&t_s, &x_m), &v_mps)| PlanPoint { t_s, x_m, v_mps }).collect()
            })
            .unwrap_or_default();
        Frame {
            seq,
            episode: self.episode,
            scenario: self.scenario.scenario_id.as_str().to_string(),
            t_s: world.t,
            phase: world.signal.phase_at(world.t),
            stop_bar_m: world.signal.stop_bar_m,
            vehicles,
            warning: self.engine.latest_warning().into(),
            plan,
            stale: self.stale,
            paused: self.paused,
            pedal: PedalView { throttle: self.pedal.throttle, brake: self.pedal.brake },
            red_violation: self.red_violation,
        }
    }
}

/// Wall-clock length of one tick at the given pace.
pub fn tick_period(pace: f64) -> std::time::Duration {
    std::time::Duration::from_secs_f64(SIM_DT / pace)
}
