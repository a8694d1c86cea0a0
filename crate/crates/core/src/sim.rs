//! Single-lane microscopic simulator: IDM car following, a fixed-time
//! signal with a virtual stop-bar leader, configurable ego driver policies
//! and per-run metrics.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::engine::{AdvisoryEngine, EngineConfig, EngineError, Observation};
use crate::signal::{Phase, SignalTimeline};
use crate::vehicle::VehicleState;
use crate::warning_mpc::{baseline_warning, driver_accel, ConstraintMode, WarningColor, WarningError, DEFAULT_COMM_RANGE};

pub const SIM_DT: f64 = 0.1;
pub const EMERGENCY_DECEL: f64 = 8.0;
/// Advisories above this intensity (0.1 m/s² of commanded deceleration)
/// count as braking.
pub const BRAKE_ONSET_U: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Warning(#[from] WarningError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub time_headway_s: f64,
    pub min_gap_m: f64,
    pub max_accel_mps2: f64,
    pub comfortable_decel_mps2: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { time_headway_s: 1.0, min_gap_m: 2.5, max_accel_mps2: 2.6, comfortable_decel_mps2: 4.5, exponent: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub rear: f64,
    pub speed: f64,
}

impl Leader {
    pub fn stop_bar(stop_bar_m: f64) -> Self {
        Self { rear: stop_bar_m, speed: 0.0 }
    }
}

/// IDM acceleration of `follower` towards `desired_speed`, clamped to
/// [-8, a_max]. A leader overlapping the follower yields the emergency
/// value.
pub fn car_following_accel(follower: &VehicleState, desired_speed: f64, leader: Option<Leader>, p: &IdmParams) -> f64 {
    let v = follower.speed;
    let free = if desired_speed > 0.0 { (v / desired_speed).powf(p.exponent) } else { 1.0 };
    let interaction = match leader {
        None => 0.0,
        Some(l) => {
            let gap = l.rear - follower.position;
            if gap <= 0.0 {
                warn!(vehicle = follower.id, gap, "vehicle overlaps its leader");
                return -EMERGENCY_DECEL;
            }
            let dv = v - l.speed;
            let s_star = p.min_gap_m + (v * p.time_headway_s + v * dv / (2.0 * (p.max_accel_mps2 * p.comfortable_decel_mps2).sqrt())).max(0.0);
            (s_star / gap).powi(2)
        }
    };
    (p.max_accel_mps2 * (1.0 - free - interaction)).clamp(-EMERGENCY_DECEL, p.max_accel_mps2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioId {
    SoloRed,
    SoloGreenToRed,
    SoloIgnore,
    PlatoonRed,
    PlatoonSplit,
    PlatoonQueue,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 6] = [
        ScenarioId::SoloRed,
        ScenarioId::SoloGreenToRed,
        ScenarioId::SoloIgnore,
        ScenarioId::PlatoonRed,
        ScenarioId::PlatoonSplit,
        ScenarioId::PlatoonQueue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::SoloRed => "solo-red",
            ScenarioId::SoloGreenToRed => "solo-green-to-red",
            ScenarioId::SoloIgnore => "solo-ignore",
            ScenarioId::PlatoonRed => "platoon-red",
            ScenarioId::PlatoonSplit => "platoon-split",
            ScenarioId::PlatoonQueue => "platoon-queue",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriverPolicy {
    /// Applies the advisory's driver acceleration every tick.
    Compliant,
    /// Holds speed until within `distance_m` of the stop bar, then complies.
    IgnoreUntil { distance_m: f64 },
    /// Drives without the advisory.
    Unguided,
}

/// How an ego driving without advice treats the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnguidedBehavior {
    /// Car following with the stop-bar leader, braking only when it binds.
    #[default]
    Lawful,
    /// Ignores the signal entirely.
    RedRunner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Advisory,
    Baseline,
    None,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::Advisory, EngineKind::Baseline, EngineKind::None];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Advisory => "advisory",
            EngineKind::Baseline => "baseline",
            EngineKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub position_m: f64,
    pub speed_mps: f64,
    #[serde(default = "default_length")]
    pub length_m: f64,
    #[serde(default = "default_connected")]
    pub connected: bool,
}

fn default_length() -> f64 {
    5.0
}

fn default_connected() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub stop_bar_m: f64,
    pub green_s: f64,
    pub yellow_s: f64,
    pub red_s: f64,
    pub offset_s: f64,
}

impl SignalSpec {
    pub fn timeline(&self) -> SignalTimeline {
        SignalTimeline { stop_bar_m: self.stop_bar_m, green_s: self.green_s, yellow_s: self.yellow_s, red_s: self.red_s, offset_s: self.offset_s }
    }
}

/// Ranges of the seeded perturbations applied by [`ScenarioConfig::variant`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationSpec {
    pub speed_fraction: f64,
    pub offset_s: f64,
}

impl Default for VariationSpec {
    fn default() -> Self {
        Self { speed_fraction: 0.2, offset_s: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario_id: ScenarioId,
    pub duration_s: f64,
    pub ego: VehicleSpec,
    /// Vehicles ahead of the ego, nearest first.
    #[serde(default)]
    pub leads: Vec<VehicleSpec>,
    pub signal: SignalSpec,
    pub driver_policy: DriverPolicy,
    #[serde(default)]
    pub unguided_behavior: UnguidedBehavior,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_noise")]
    pub observation_noise_mps: f64,
    #[serde(default)]
    pub variation: VariationSpec,
}

fn default_noise() -> f64 {
    0.1
}

fn solo(id: ScenarioId, speed: f64, signal: SignalSpec, duration_s: f64, policy: DriverPolicy) -> ScenarioConfig {
    ScenarioConfig {
        scenario_id: id,
        duration_s,
        ego: VehicleSpec { position_m: -500.0, speed_mps: speed, length_m: 5.0, connected: true },
        leads: Vec::new(),
        signal,
        driver_policy: policy,
        unguided_behavior: UnguidedBehavior::Lawful,
        rng_seed: 0,
        observation_noise_mps: 0.1,
        variation: VariationSpec::default(),
    }
}

/// Platoon of `n` vehicles ahead of the ego with bumper gaps `gap`, the
/// nearest one `ego_gap` ahead of the ego front.
fn platoon(ego_position: f64, ego_gap: f64, gap: f64, n: usize, speed: f64) -> Vec<VehicleSpec> {
    let length = 5.0;
    let mut front = ego_position + ego_gap + length;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(VehicleSpec { position_m: front, speed_mps: speed, length_m: length, connected: true });
        front += gap + length;
    }
    out
}

/// Signal whose first yellow onset is at `yellow_at` seconds.
fn signal_with_yellow_at(yellow_at: f64, green: f64, yellow: f64, red: f64) -> SignalSpec {
    SignalSpec { stop_bar_m: 0.0, green_s: green, yellow_s: yellow, red_s: red, offset_s: green - yellow_at }
}

/// Signal that is red from the start with `red_left` seconds remaining.
fn signal_red_for(red_left: f64, green: f64, yellow: f64, red: f64) -> SignalSpec {
    SignalSpec { stop_bar_m: 0.0, green_s: green, yellow_s: yellow, red_s: red, offset_s: green + yellow + red - red_left }
}

impl ScenarioConfig {
    pub fn canonical(id: ScenarioId) -> Self {
        let v0 = 24.6;
        match id {
            ScenarioId::SoloRed => solo(id, v0, signal_red_for(40.0, 30.0, 4.0, 40.0), 35.0, DriverPolicy::Compliant),
            ScenarioId::SoloGreenToRed => solo(id, v0, signal_with_yellow_at(12.0, 30.0, 4.0, 30.0), 35.0, DriverPolicy::Compliant),
            ScenarioId::SoloIgnore => solo(id, 21.0, signal_red_for(40.0, 30.0, 4.0, 40.0), 35.0, DriverPolicy::IgnoreUntil { distance_m: 60.0 }),
            ScenarioId::PlatoonRed => ScenarioConfig {
                leads: platoon(-500.0, 45.0, 30.0, 3, v0),
                ..solo(id, v0, signal_with_yellow_at(4.0, 30.0, 4.0, 36.0), 40.0, DriverPolicy::Compliant)
            },
            ScenarioId::PlatoonSplit => ScenarioConfig {
                leads: platoon(-500.0, 45.0, 30.0, 3, v0),
                ..solo(id, v0, signal_with_yellow_at(16.0, 30.0, 4.0, 30.0), 35.0, DriverPolicy::Compliant)
            },
            ScenarioId::PlatoonQueue => ScenarioConfig {
                leads: platoon(-18.5 - 2.5 - 5.0, 2.5, 3.0, 3, 0.0),
                ..solo(id, v0, signal_red_for(15.0, 30.0, 4.0, 40.0), 40.0, DriverPolicy::Compliant)
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScenario(m.to_string()));
        let s = &self.signal;
        if !(s.yellow_s > 0.0) || !(s.green_s >= 0.0) || !(s.red_s >= 0.0) {
            return bad("signal phase durations must be non-negative with a positive yellow");
        }
        if !(self.duration_s > 0.0) {
            return bad("duration must be positive");
        }
        let min_gap = IdmParams::default().min_gap_m;
        let mut behind = &self.ego;
        for lead in &self.leads {
            if !(lead.speed_mps >= 0.0) || !(lead.length_m > 0.0) {
                return bad("lead speeds must be non-negative and lengths positive");
            }
            if lead.position_m - lead.length_m - behind.position_m < min_gap - 1e-9 {
                return bad("platoon spacing below the minimum gap");
            }
            behind = lead;
        }
        if !(self.ego.speed_mps >= 0.0) || !(self.ego.length_m > 0.0) {
            return bad("ego speed must be non-negative and length positive");
        }
        Ok(())
    }

    /// Seeded perturbation of initial speeds and signal offset. Seed 0 is
    /// not special; the canonical configuration is the unperturbed one.
    pub fn variant(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = self.variation.speed_fraction;
        let o = self.variation.offset_s;
        let speed_scale = if f > 0.0 { 1.0 + rng.random_range(-f..=f) } else { 1.0 };
        let offset = if o > 0.0 { rng.random_range(-o..=o) } else { 0.0 };
        let mut out = self.clone();
        out.rng_seed = seed;
        out.ego.speed_mps *= speed_scale;
        for lead in &mut out.leads {
            lead.speed_mps *= speed_scale;
        }
        out.signal.offset_s += offset;
        out
    }

    pub fn with_policy(mut self, policy: DriverPolicy) -> Self {
        self.driver_policy = policy;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SimVehicle {
    desired_speed: f64,
    /// Sticky yellow decision: `Some(true)` once committed to crossing.
    yellow_go: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisoryRecord {
    pub t: f64,
    pub u: f64,
    pub color: WarningColor,
    pub mode: ConstraintMode,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub vehicle_id: u32,
    pub x: f64,
    pub v: f64,
    pub a: f64,
    pub phase: Phase,
    pub u: f64,
    pub baseline_flag: bool,
}

pub const TRACE_HEADER: &str = "t,vehicle_id,x,v,a,phase,u,baseline_flag";

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 48 + 64);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{:.1},{},{:.4},{:.4},{:.4},{},{:.4},{}", r.t, r.vehicle_id, r.x, r.v, r.a, r.phase.as_str(), r.u, r.baseline_flag as u8);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario_id: ScenarioId,
    pub engine: EngineKind,
    pub seed: u64,
    /// Largest ego deceleration over the run, m/s², never negative.
    pub peak_decel: f64,
    /// The ego front crossed the stop bar while red.
    pub red_violation: bool,
    /// Smallest bumper gap between the ego and its leader, m.
    pub min_spacing: Option<f64>,
    /// Ego front position when it first came to rest.
    pub stop_position: Option<f64>,
    pub crossing_time: Option<f64>,
    /// Lowest ego speed after the first green following the run start.
    pub min_speed_after_green: Option<f64>,
    pub first_brake_time: Option<f64>,
    pub first_yellow_time: Option<f64>,
    pub first_red_class_time: Option<f64>,
    pub baseline_onset: Option<f64>,
    /// Time the ego first applied a negative acceleration.
    pub ego_brake_onset: Option<f64>,
    pub yellow_onset: f64,
    pub non_ego_red_violations: usize,
    pub overlap_incidents: usize,
    pub stale_advisories: usize,
    pub advisory: Vec<AdvisoryRecord>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: Vec<TraceRow>,
}

/// Inputs for an ego driver at one tick.
pub struct EgoContext<'a> {
    pub t: f64,
    pub state: &'a VehicleState,
    pub leader: Option<Leader>,
    pub u: f64,
}

pub struct World {
    pub t: f64,
    pub vehicles: Vec<VehicleState>,
    aux: Vec<SimVehicle>,
    pub signal: SignalTimeline,
    pub idm: IdmParams,
    pub ego_index: usize,
}

impl World {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        let mk = |id: u32, s: &VehicleSpec, ego: bool| VehicleState {
            id,
            position: s.position_m,
            speed: s.speed_mps,
            accel: 0.0,
            length: s.length_m,
            connected: s.connected,
            is_ego: ego,
        };
        let mut vehicles = vec![mk(0, &cfg.ego, true)];
        vehicles.extend(cfg.leads.iter().enumerate().map(|(i, s)| mk(i as u32 + 1, s, false)));
        let v0 = EngineConfig::default().flow.free_flow_speed;
        let aux = vehicles
            .iter()
            .map(|v| SimVehicle { desired_speed: if v.speed > 0.0 { v.speed } else { v0 }, yellow_go: None })
            .collect();
        Self { t: 0.0, vehicles, aux, signal: cfg.signal.timeline(), idm: IdmParams::default(), ego_index: 0 }
    }

    pub fn ego(&self) -> &VehicleState {
        &self.vehicles[self.ego_index]
    }

    /// Index of the nearest vehicle ahead of vehicle `i`.
    pub fn leader_of(&self, i: usize) -> Option<usize> {
        let x = self.vehicles[i].position;
        let mut best: Option<usize> = None;
        for (j, v) in self.vehicles.iter().enumerate() {
            if j != i && (v.position > x || (v.position == x && j > i)) && best.is_none_or(|b| v.position < self.vehicles[b].position) {
                best = Some(j);
            }
        }
        best
    }

    fn leader_state(&self, i: usize) -> Option<Leader> {
        self.leader_of(i).map(|j| Leader { rear: self.vehicles[j].rear(), speed: self.vehicles[j].speed })
    }

    /// Lawful car-following acceleration with the stop-bar leader.
    fn lawful_accel(&mut self, i: usize) -> f64 {
        let v = &self.vehicles[i];
        let bar = self.signal.stop_bar_m;
        let phase = self.signal.phase_at(self.t);
        let upstream = v.position <= bar;
        let aux = &mut self.aux[i];
        if phase == Phase::Green {
            aux.yellow_go = None;
        }
        let stop_for_signal = upstream
            && match phase {
                Phase::Green => false,
                Phase::Yellow => {
                    let go = *aux.yellow_go.get_or_insert_with(|| {
                        let remaining = self.signal.time_in_phase_remaining(self.t);
                        v.speed > 0.0 && (bar - v.position) / v.speed <= remaining
                    });
                    !go
                }
                Phase::Red => aux.yellow_go != Some(true),
            };
        let mut leader = self.leader_state(i);
        if stop_for_signal {
            let bar_leader = Leader::stop_bar(bar);
            leader = match leader {
                Some(l) if l.rear < bar_leader.rear => Some(l),
                _ => Some(bar_leader),
            };
        }
        car_following_accel(&self.vehicles[i], self.aux[i].desired_speed, leader, &self.idm)
    }

    fn free_accel(&self, i: usize) -> f64 {
        car_following_accel(&self.vehicles[i], self.aux[i].desired_speed, self.leader_state(i), &self.idm)
    }

    /// Advances every vehicle by one tick. `ego_accel` overrides the ego's
    /// acceleration when set.
    pub fn step(&mut self, ego_accel: Option<f64>, ego_lawful: bool) -> StepEvents {
        let n = self.vehicles.len();
        let mut accel = vec![0.0; n];
        for (i, a) in accel.iter_mut().enumerate() {
            *a = if i == self.ego_index {
                match ego_accel {
                    Some(a) => a,
                    None if ego_lawful => self.lawful_accel(i),
                    None => self.free_accel(i),
                }
            } else {
                self.lawful_accel(i)
            };
        }
        let before: Vec<f64> = self.vehicles.iter().map(|v| v.position).collect();
        for (v, a) in self.vehicles.iter_mut().zip(&accel) {
            let a = a.clamp(-EMERGENCY_DECEL, self.idm.max_accel_mps2.max(*a));
            let speed = (v.speed + a * SIM_DT).max(0.0);
            v.accel = (speed - v.speed) / SIM_DT;
            v.speed = speed;
            v.position += speed * SIM_DT;
        }
        self.t += SIM_DT;
        let bar = self.signal.stop_bar_m;
        let red = self.signal.phase_at(self.t) == Phase::Red;
        let mut events = StepEvents::default();
        for (i, v) in self.vehicles.iter().enumerate() {
            if before[i] <= bar && v.position > bar {
                if red {
                    if i == self.ego_index {
                        events.ego_red_violation = true;
                    } else {
                        events.non_ego_red_violations += 1;
                    }
                }
                if i == self.ego_index {
                    events.ego_crossed = true;
                }
            }
            if let Some(j) = self.leader_of(i) {
                if self.vehicles[j].rear() - v.position < 0.0 {
                    events.overlaps += 1;
                }
            }
        }
        events
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepEvents {
    pub ego_red_violation: bool,
    pub ego_crossed: bool,
    pub non_ego_red_violations: usize,
    pub overlaps: usize,
}

pub fn observation(world: &World, noise: &mut dyn FnMut() -> f64) -> Observation {
    let ego = world.ego().clone();
    let lead_idx = world.leader_of(world.ego_index);
    let noisy = |v: &VehicleState, n: f64| VehicleState { speed: (v.speed + n).max(0.0), ..v.clone() };
    let lead = lead_idx.map(|j| noisy(&world.vehicles[j], noise()));
    let connected = world
        .vehicles
        .iter()
        .enumerate()
        .filter(|&(j, v)| j != world.ego_index && Some(j) != lead_idx && v.connected)
        .map(|(_, v)| noisy(v, noise()))
        .collect();
    Observation { ego: Some(noisy(&ego, noise())), lead, connected }
}

/// Runs one scenario to completion with the given engine.
pub fn run_scenario(cfg: &ScenarioConfig, engine_kind: EngineKind) -> Result<RunOutput, SimError> {
    run_scenario_with(cfg, engine_kind, EngineConfig::default())
}

pub fn run_scenario_with(cfg: &ScenarioConfig, engine_kind: EngineKind, engine_cfg: EngineConfig) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let mut world = World::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let normal = Normal::new(0.0, cfg.observation_noise_mps.max(0.0)).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    let mut noise = || if cfg.observation_noise_mps > 0.0 { normal.sample(&mut rng) } else { 0.0 };
    let mpc_cfg = engine_cfg.mpc.clone();
    let mut engine = (engine_kind == EngineKind::Advisory).then(|| AdvisoryEngine::new(engine_cfg));
    let steps = (cfg.duration_s / SIM_DT).round() as usize;
    let n_veh = world.vehicles.len();
    let mut trace = Vec::with_capacity((steps + 1) * n_veh);

    let mut m = RunMetrics {
        scenario_id: cfg.scenario_id,
        engine: engine_kind,
        seed: cfg.rng_seed,
        peak_decel: 0.0,
        red_violation: false,
        min_spacing: None,
        stop_position: None,
        crossing_time: None,
        min_speed_after_green: None,
        first_brake_time: None,
        first_yellow_time: None,
        first_red_class_time: None,
        baseline_onset: None,
        ego_brake_onset: None,
        yellow_onset: world.signal.next_yellow_onset(0.0),
        non_ego_red_violations: 0,
        overlap_incidents: 0,
        stale_advisories: 0,
        advisory: Vec::new(),
    };
    let first_green = {
        let s = &world.signal;
        if s.phase_at(0.0) == Phase::Green {
            s.next_yellow_onset(0.0) + s.yellow_s + s.red_s
        } else {
            s.time_in_phase_remaining(0.0) + if s.phase_at(0.0) == Phase::Yellow { s.red_s } else { 0.0 }
        }
    };

    let mut u = 0.0;
    let record = |world: &World, trace: &mut Vec<TraceRow>, u: f64, flag: bool| {
        let phase = world.signal.phase_at(world.t);
        for v in &world.vehicles {
            trace.push(TraceRow { t: world.t, vehicle_id: v.id, x: v.position, v: v.speed, a: v.accel, phase, u, baseline_flag: flag });
        }
    };
    let spacing = |world: &World| world.leader_of(world.ego_index).map(|j| world.vehicles[j].rear() - world.ego().position);
    m.min_spacing = spacing(&world);

    for _ in 0..steps {
        let t = world.t;
        if let Some(engine) = engine.as_mut() {
            let obs = observation(&world, &mut noise);
            let report = engine.on_tick(t, &obs, &world.signal)?;
            if report.advisory_refreshed {
                if let Some(out) = engine.latest_outcome() {
                    u = out.signal.u;
                    let rec = AdvisoryRecord { t, u, color: out.signal.color, mode: out.mode, stale: out.stale };
                    if u > BRAKE_ONSET_U && m.first_brake_time.is_none() {
                        m.first_brake_time = Some(t);
                    }
                    if rec.color != WarningColor::Green && m.first_yellow_time.is_none() {
                        m.first_yellow_time = Some(t);
                    }
                    if rec.color == WarningColor::Red && m.first_red_class_time.is_none() {
                        m.first_red_class_time = Some(t);
                    }
                    m.stale_advisories += rec.stale as usize;
                    m.advisory.push(rec);
                }
            }
        }
        let flag = baseline_warning(world.ego(), &world.signal, DEFAULT_COMM_RANGE, t);
        if flag && m.baseline_onset.is_none() {
            m.baseline_onset = Some(t);
        }
        record(&world, &mut trace, u, flag);

        let ego = world.ego().clone();
        let ego_accel = match (engine_kind, cfg.driver_policy) {
            (EngineKind::Advisory, DriverPolicy::Compliant) => Some(driver_accel(u, &mpc_cfg)?),
            (EngineKind::Advisory, DriverPolicy::IgnoreUntil { distance_m }) => {
                if world.signal.stop_bar_m - ego.position > distance_m {
                    Some(0.0)
                } else {
                    Some(driver_accel(u, &mpc_cfg)?)
                }
            }
            _ => None,
        };
        let lawful = cfg.unguided_behavior == UnguidedBehavior::Lawful;
        let ev = world.step(ego_accel, lawful);

        let ego = world.ego();
        m.peak_decel = m.peak_decel.max(-ego.accel);
        if ego.accel < 0.0 && m.ego_brake_onset.is_none() {
            m.ego_brake_onset = Some(t);
        }
        m.red_violation |= ev.ego_red_violation;
        m.non_ego_red_violations += ev.non_ego_red_violations;
        m.overlap_incidents += ev.overlaps;
        if ev.ego_crossed && m.crossing_time.is_none() {
            m.crossing_time = Some(world.t);
        }
        if ego.speed < 1e-3 && m.stop_position.is_none() {
            m.stop_position = Some(ego.position);
        }
        if world.t >= first_green - 1e-9 && ego.position <= world.signal.stop_bar_m {
            let s = ego.speed;
            m.min_speed_after_green = Some(m.min_speed_after_green.map_or(s, |p: f64| p.min(s)));
        }
        if let Some(s) = spacing(&world) {
            m.min_spacing = Some(m.min_spacing.map_or(s, |p| p.min(s)));
        }
    }
    let flag = baseline_warning(world.ego(), &world.signal, DEFAULT_COMM_RANGE, world.t);
    record(&world, &mut trace, u, flag);
    Ok(RunOutput { metrics: m, trace })
}
