//! Advisory decision layer: constraint-mode selection, horizon scheduling,
//! the condensed longitudinal MPC, warning classification and the
//! kinematic single-stage baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::prediction::PredictedTrajectory;
use crate::qp_core::{self, KktResiduals, QpError, QpProblem, RowGroup, SolveStatus, SolverSettings};
use crate::signal::{Phase, SignalTimeline};
use crate::vehicle::VehicleState;

#[derive(Debug, Error, PartialEq)]
pub enum WarningError {
    #[error("warning intensity {u} outside [{min}, {max}]")]
    IntensityOutOfRange { u: f64, min: f64, max: f64 },
    #[error("mode {0:?} needs a lead trajectory")]
    MissingLead(ConstraintMode),
    #[error("invalid advisory configuration: {0}")]
    InvalidConfig(String),
    #[error("horizon {0} s is not a positive multiple of the MPC step")]
    BadHorizon(f64),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Longest horizon used by the schedule, s.
    pub horizon: f64,
    pub mpc_dt: f64,
    pub w_accel: f64,
    pub w_jerk: f64,
    pub w_speed: f64,
    pub w_terminal_speed: f64,
    pub w_terminal_position: f64,
    /// Penalty on the slack added when a hard row group has to be relaxed.
    pub w_relax: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Desired time headway to the stop bar while red, s.
    pub tau_tl: f64,
    pub h_min: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Multiplier on the lead-position standard deviation.
    pub beta: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Denominator of the linear driver model a = -u / gain.
    pub driver_gain: f64,
    pub free_flow_speed: f64,
    pub ref_steepness: f64,
    pub ref_offset: f64,
    pub terminal_trigger: TerminalTrigger,
    /// The ego only counts as clearing the signal when its predicted
    /// crossing leads the red onset by at least this much, s.
    pub clearance_margin_s: f64,
    pub solver: SolverSettings,
}

/// Source of the terminal-time ego position that decides whether the
/// stop-at-bar rows are added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerminalTrigger {
    /// The traffic-model prediction of the ego.
    Prediction,
    /// The previous advisory plan when it was already stopping for the
    /// signal, otherwise the traffic-model prediction. The rows are only
    /// added when a stop that far downstream is kinematically reachable.
    #[default]
    Plan,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let v0 = 24.6;
        Self {
            horizon: 10.0,
            mpc_dt: 0.2,
            w_accel: 1.0,
            w_jerk: 2.0,
            w_speed: 0.1,
            w_terminal_speed: 1e4,
            w_terminal_position: 1e4,
            w_relax: 1e4,
            v_min: 0.0,
            v_max: 1.1 * v0,
            a_min: -4.5,
            a_max: 2.6,
            tau_tl: 1.0,
            h_min: 1.5,
            d_min: 2.5,
            d_max: 5.0 * v0,
            beta: 1.0,
            u_min: -20.0,
            u_max: 100.0,
            driver_gain: 20.0,
            free_flow_speed: v0,
            ref_steepness: 0.015,
            ref_offset: 200.0,
            terminal_trigger: TerminalTrigger::Plan,
            clearance_margin_s: 0.5,
            solver: SolverSettings::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), WarningError> {
        let bad = |m: &str| Err(WarningError::InvalidConfig(m.to_string()));
        if !(self.u_min < 0.0 && self.u_max > 0.0) {
            return bad("u_min < 0 < u_max required");
        }
        if !(self.a_min < 0.0 && self.a_max > 0.0) {
            return bad("a_min < 0 < a_max required");
        }
        if !(self.h_min > 0.0 && self.d_min > 0.0 && self.d_max > self.d_min) {
            return bad("h_min > 0, d_min > 0 and d_max > d_min required");
        }
        if !(self.mpc_dt > 0.0 && self.horizon >= self.mpc_dt && self.driver_gain > 0.0) {
            return bad("positive step, horizon and driver gain required");
        }
        let weights = [self.w_accel, self.w_jerk, self.w_speed, self.w_terminal_speed, self.w_terminal_position, self.w_relax];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("weights must be finite and non-negative");
        }
        if !(self.clearance_margin_s >= 0.0) {
            return bad("clearance margin must be non-negative");
        }
        if self.w_terminal_speed <= 0.0 || self.w_terminal_position <= 0.0 || self.w_relax <= 0.0 {
            return bad("slack penalties must be positive");
        }
        Ok(())
    }

    /// Warning range that also respects the acceleration bounds.
    pub fn effective_u_bounds(&self) -> (f64, f64) {
        let lo = self.u_min.max(-self.driver_gain * self.a_max);
        let hi = self.u_max.min(-self.driver_gain * self.a_min);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarningColor {
    Green,
    Yellow,
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarningSignal {
    pub u: f64,
    pub color: WarningColor,
    pub diameter_fraction: f64,
}

pub const YELLOW_THRESHOLD: f64 = 10.0;
pub const RED_THRESHOLD: f64 = 60.0;

pub fn classify(u: f64) -> WarningSignal {
    let color = if u < YELLOW_THRESHOLD {
        WarningColor::Green
    } else if u <= RED_THRESHOLD {
        WarningColor::Yellow
    } else {
        WarningColor::Red
    };
    WarningSignal { u, color, diameter_fraction: u.clamp(0.0, 100.0) / 100.0 }
}

pub fn driver_accel(u: f64, cfg: &MpcConfig) -> Result<f64, WarningError> {
    if !(u >= cfg.u_min && u <= cfg.u_max) {
        return Err(WarningError::IntensityOutOfRange { u, min: cfg.u_min, max: cfg.u_max });
    }
    Ok(-u / cfg.driver_gain)
}

/// Reference speed at position `x`. `stopping` selects the sigmoid that
/// falls towards zero ahead of the stop bar; otherwise the free-flow speed.
pub fn reference_speed(x: f64, stopping: bool, stop_bar: f64, v0: f64, k_ref: f64, x_off: f64) -> f64 {
    if !stopping {
        return v0;
    }
    v0 / (1.0 + (-k_ref * (stop_bar - x - x_off)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonChoice {
    pub horizon: f64,
    pub d_tl: f64,
}

pub fn horizon_schedule(distance_to_stop_bar: f64) -> HorizonChoice {
    let (horizon, d_tl) = if distance_to_stop_bar <= 20.0 {
        (6.0, 5.0)
    } else if distance_to_stop_bar <= 40.0 {
        (8.0, 10.0)
    } else if distance_to_stop_bar <= 60.0 {
        (10.0, 15.0)
    } else {
        (10.0, 20.0)
    };
    HorizonChoice { horizon, d_tl }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    NoLeadNoRed,
    NoLeadRed,
    NoLeadRedTerminal,
    /// Lead and ego both stop: both spacing rows plus the red headway.
    LeadBothStop,
    /// Lead clears before red, ego does not: minimum spacing plus red rows.
    LeadPasses { terminal: bool },
    /// Lead present but the signal imposes nothing on the ego.
    LeadFollow,
}

impl ConstraintMode {
    pub fn needs_lead(self) -> bool {
        matches!(self, Self::LeadBothStop | Self::LeadPasses { .. } | Self::LeadFollow)
    }

    pub fn red_headway(self) -> bool {
        matches!(self, Self::NoLeadRed | Self::NoLeadRedTerminal | Self::LeadBothStop | Self::LeadPasses { .. })
    }

    pub fn terminal(self) -> bool {
        matches!(self, Self::NoLeadRedTerminal | Self::LeadPasses { terminal: true })
    }

    pub fn max_spacing(self) -> bool {
        matches!(self, Self::LeadBothStop)
    }

    pub fn min_spacing(self) -> bool {
        self.needs_lead()
    }

    /// Whether the ego is expected to stop for the signal.
    pub fn stopping(self) -> bool {
        self.red_headway()
    }
}

/// Predicted motion of the immediate leader; `length` converts its front
/// position to the rear bumper used by the spacing rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadPrediction {
    pub traj: PredictedTrajectory,
    pub length: f64,
}

/// First time the trajectory reaches `stop_bar`, linearly interpolated.
pub fn crossing_time(traj: &PredictedTrajectory, stop_bar: f64) -> Option<f64> {
    if traj.x[0] >= stop_bar {
        return Some(traj.t[0]);
    }
    for k in 1..traj.len() {
        if traj.x[k] >= stop_bar {
            let w = (stop_bar - traj.x[k - 1]) / (traj.x[k] - traj.x[k - 1]);
            return Some(traj.t[k - 1] + w * (traj.t[k] - traj.t[k - 1]));
        }
    }
    None
}

fn step_count(horizon: f64, dt: f64) -> Result<usize, WarningError> {
    let n = (horizon / dt).round();
    if !(n >= 1.0) || (n * dt - horizon).abs() > 1e-9 {
        return Err(WarningError::BadHorizon(horizon));
    }
    Ok(n as usize)
}

pub fn select_mode(
    ego_pred: &PredictedTrajectory,
    lead_pred: Option<&PredictedTrajectory>,
    signal: &SignalTimeline,
    cfg: &MpcConfig,
    t0: f64,
    choice: HorizonChoice,
) -> ConstraintMode {
    let n = (choice.horizon / cfg.mpc_dt).round() as usize;
    let red_in_horizon = (0..=n).any(|k| signal.phase_at(t0 + k as f64 * cfg.mpc_dt) == Phase::Red);
    let red_onset = t0 + signal.time_to_red(t0);
    let crosses_before = |traj: &PredictedTrajectory, margin: f64| crossing_time(traj, signal.stop_bar_m).is_some_and(|tc| tc + margin < red_onset);
    let ego_clear = ego_pred.x[0] >= signal.stop_bar_m || crosses_before(ego_pred, cfg.clearance_margin_s);
    if !red_in_horizon || ego_clear {
        return if lead_pred.is_some() { ConstraintMode::LeadFollow } else { ConstraintMode::NoLeadNoRed };
    }
    let t_f = t0 + choice.horizon;
    let terminal = signal.phase_at(t_f) == Phase::Red && ego_pred.sample(t_f).0 >= signal.stop_bar_m - choice.d_tl;
    match lead_pred {
        None if terminal => ConstraintMode::NoLeadRedTerminal,
        None => ConstraintMode::NoLeadRed,
        Some(lead) => {
            if lead.x[0] >= signal.stop_bar_m || crosses_before(lead, 0.0) {
                ConstraintMode::LeadPasses { terminal }
            } else {
                ConstraintMode::LeadBothStop
            }
        }
    }
}

/// Everything besides the configuration that fixes one transcription.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptionInput<'a> {
    pub t0: f64,
    pub choice: HorizonChoice,
    /// Reference speed for steps 1..=N.
    pub reference: &'a [f64],
    /// Row groups softened by an extra penalised slack, in relaxation order.
    pub relaxed: &'a [RowGroup],
}

/// Condensed dynamics: speed and position at step k as affine functions
/// of the warning sequence.
pub struct Condensed {
    pub n: usize,
    pub dt: f64,
    /// `bv[(k, i)]`: sensitivity of v_k to u_i, k = 0..=N.
    pub bv: DMatrix<f64>,
    pub bx: DMatrix<f64>,
    pub x0: f64,
    pub v0: f64,
}

impl Condensed {
    pub fn new(n: usize, dt: f64, gain: f64, x0: f64, v0: f64) -> Self {
        let bv = DMatrix::from_fn(n + 1, n, |k, i| if i < k { -dt / gain } else { 0.0 });
        let bx = DMatrix::from_fn(n + 1, n, |k, i| if i + 1 < k { -dt * dt * (k - 1 - i) as f64 / gain } else { 0.0 });
        Self { n, dt, bv, bx, x0, v0 }
    }

    pub fn position_offset(&self, k: usize) -> f64 {
        self.x0 + k as f64 * self.dt * self.v0
    }
}

struct RowBuilder {
    rows: Vec<Vec<f64>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    groups: Vec<RowGroup>,
    nvars: usize,
}

impl RowBuilder {
    fn push(&mut self, coeffs: Vec<f64>, lower: f64, upper: f64, group: RowGroup) {
        debug_assert_eq!(coeffs.len(), self.nvars);
        self.rows.push(coeffs);
        self.lower.push(lower);
        self.upper.push(upper);
        self.groups.push(group);
    }

    fn row(&self) -> Vec<f64> {
        vec![0.0; self.nvars]
    }
}

/// Builds the condensed QP over `[u_0..u_{N-1}, gamma_v, gamma_x, relax...]`.
pub fn transcribe(
    cfg: &MpcConfig,
    init: &VehicleState,
    lead: Option<&LeadPrediction>,
    signal: &SignalTimeline,
    mode: ConstraintMode,
    input: &TranscriptionInput,
) -> Result<QpProblem, WarningError> {
    if mode.needs_lead() && lead.is_none() {
        return Err(WarningError::MissingLead(mode));
    }
    let n = step_count(input.choice.horizon, cfg.mpc_dt)?;
    if input.reference.len() != n {
        return Err(WarningError::InvalidConfig(format!("reference has {} samples, expected {n}", input.reference.len())));
    }
    let dt = cfg.mpc_dt;
    let c = Condensed::new(n, dt, cfg.driver_gain, init.position, init.speed);
    let relax_max = input.relaxed.contains(&RowGroup::MaxSpacing) && mode.max_spacing();
    let relax_tl = input.relaxed.contains(&RowGroup::RedHeadway) && mode.red_headway();
    let gv = n;
    let gx = n + 1;
    let mut nvars = n + 2;
    let s_max = relax_max.then(|| {
        nvars += 1;
        nvars - 1
    });
    let s_tl = relax_tl.then(|| {
        nvars += 1;
        nvars - 1
    });

    let mut var_names: Vec<String> = (0..n).map(|k| format!("u_{k}")).collect();
    var_names.push("gamma_v".into());
    var_names.push("gamma_x".into());
    if s_max.is_some() {
        var_names.push("relax_max_spacing".into());
    }
    if s_tl.is_some() {
        var_names.push("relax_red_headway".into());
    }

    // cost
    let g2 = cfg.driver_gain * cfg.driver_gain;
    let mut h = DMatrix::<f64>::zeros(nvars, nvars);
    let mut g = DVector::<f64>::zeros(nvars);
    for k in 0..n {
        h[(k, k)] += 2.0 * dt * cfg.w_accel / g2;
    }
    let jerk = 2.0 * cfg.w_jerk / (dt * g2);
    for k in 1..n {
        h[(k, k)] += jerk;
        h[(k - 1, k - 1)] += jerk;
        h[(k, k - 1)] -= jerk;
        h[(k - 1, k)] -= jerk;
    }
    let track = 2.0 * dt * cfg.w_speed;
    for k in 1..=n {
        let row = c.bv.row(k);
        let resid = c.v0 - input.reference[k - 1];
        for i in 0..n {
            g[i] += track * row[i] * resid;
            for j in 0..n {
                h[(i, j)] += track * row[i] * row[j];
            }
        }
    }
    h[(gv, gv)] += 2.0 * cfg.w_terminal_speed;
    h[(gx, gx)] += 2.0 * cfg.w_terminal_position;
    for s in [s_max, s_tl].into_iter().flatten() {
        h[(s, s)] += 2.0 * cfg.w_relax;
    }

    let mut rb = RowBuilder { rows: Vec::new(), lower: Vec::new(), upper: Vec::new(), groups: Vec::new(), nvars };
    let (u_lo, u_hi) = cfg.effective_u_bounds();
    for k in 0..n {
        let mut r = rb.row();
        r[k] = 1.0;
        rb.push(r, u_lo, u_hi, RowGroup::InputBox);
    }
    let v_max = cfg.v_max.max(init.speed);
    let v_min = cfg.v_min.min(init.speed);
    for k in 1..=n {
        let mut r = rb.row();
        r[..n].copy_from_slice(c.bv.row(k).transpose().as_slice());
        rb.push(r, v_min - c.v0, v_max - c.v0, RowGroup::SpeedBounds);
    }
    for s in [gv, gx] {
        let mut r = rb.row();
        r[s] = 1.0;
        rb.push(r, 0.0, f64::INFINITY, RowGroup::SlackBox);
    }
    for s in [s_max, s_tl].into_iter().flatten() {
        let mut r = rb.row();
        r[s] = 1.0;
        rb.push(r, 0.0, f64::INFINITY, RowGroup::SlackBox);
    }

    let x_tl = signal.stop_bar_m;
    if mode.red_headway() {
        for k in 1..=n {
            if signal.phase_at(input.t0 + k as f64 * dt) != Phase::Red {
                continue;
            }
            let mut r = rb.row();
            for i in 0..n {
                r[i] = c.bx[(k, i)] + cfg.tau_tl * c.bv[(k, i)];
            }
            if let Some(s) = s_tl {
                r[s] = -1.0;
            }
            let rhs = x_tl - c.position_offset(k) - cfg.tau_tl * c.v0;
            rb.push(r, f64::NEG_INFINITY, rhs, RowGroup::RedHeadway);
        }
    }
    if mode.terminal() {
        let mut r = rb.row();
        r[..n].copy_from_slice(c.bv.row(n).transpose().as_slice());
        r[gv] = -1.0;
        let rhs = -c.v0;
        rb.push(r, rhs, rhs, RowGroup::TerminalSpeed);
        let mut r = rb.row();
        r[..n].copy_from_slice(c.bx.row(n).transpose().as_slice());
        r[gx] = 1.0;
        rb.push(r, x_tl - input.choice.d_tl - c.position_offset(n), f64::INFINITY, RowGroup::TerminalPosition);
    }
    if let Some(lead) = lead.filter(|_| mode.min_spacing()) {
        for k in 1..=n {
            let (xl, _, sigma) = lead.traj.sample(input.t0 + k as f64 * dt);
            let rear = xl - lead.length;
            let mut r = rb.row();
            for i in 0..n {
                r[i] = c.bx[(k, i)] + cfg.h_min * c.bv[(k, i)];
            }
            let rhs = rear - cfg.beta * sigma - cfg.d_min - c.position_offset(k) - cfg.h_min * c.v0;
            rb.push(r, f64::NEG_INFINITY, rhs, RowGroup::MinSpacing);
            if mode.max_spacing() {
                let mut r = rb.row();
                r[..n].copy_from_slice(c.bx.row(k).transpose().as_slice());
                if let Some(s) = s_max {
                    r[s] = 1.0;
                }
                let lhs = rear + cfg.beta * sigma - cfg.d_max - c.position_offset(k);
                rb.push(r, lhs, f64::INFINITY, RowGroup::MaxSpacing);
            }
        }
    }

    let m = rb.rows.len();
    let a = DMatrix::from_fn(m, nvars, |i, j| rb.rows[i][j]);
    Ok(QpProblem {
        hessian: h,
        gradient: g,
        constraints: a,
        lower: DVector::from_vec(rb.lower),
        upper: DVector::from_vec(rb.upper),
        var_names,
        row_groups: rb.groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PlannedTrajectory {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// Acceleration and warning applied over [t_k, t_{k+1}).
    pub a: Vec<f64>,
    pub u: Vec<f64>,
}

impl PlannedTrajectory {
    fn rollout(t0: f64, init: &VehicleState, u: &[f64], cfg: &MpcConfig) -> Self {
        let mut plan = Self::default();
        let (mut x, mut v) = (init.position, init.speed);
        for (k, &uk) in u.iter().enumerate() {
            let a = -uk / cfg.driver_gain;
            plan.t.push(t0 + k as f64 * cfg.mpc_dt);
            plan.x.push(x);
            plan.v.push(v);
            plan.a.push(a);
            plan.u.push(uk);
            x += cfg.mpc_dt * v;
            v += cfg.mpc_dt * a;
        }
        plan.t.push(t0 + u.len() as f64 * cfg.mpc_dt);
        plan.x.push(x);
        plan.v.push(v);
        plan
    }

    /// Position at time `t`, extrapolated at the final speed.
    pub fn position_at(&self, t: f64) -> f64 {
        let n = self.t.len();
        if n == 0 {
            return f64::NAN;
        }
        if t <= self.t[0] {
            return self.x[0];
        }
        if t >= self.t[n - 1] {
            return self.x[n - 1] + (t - self.t[n - 1]) * self.v[n - 1].max(0.0);
        }
        let k = self.t.partition_point(|&s| s <= t) - 1;
        let w = (t - self.t[k]) / (self.t[k + 1] - self.t[k]);
        self.x[k] + w * (self.x[k + 1] - self.x[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningOutcome {
    pub signal: WarningSignal,
    pub plan: PlannedTrajectory,
    pub mode: ConstraintMode,
    pub choice: HorizonChoice,
    pub stale: bool,
    pub relaxed: Vec<RowGroup>,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

/// Per-ego advisory state: warm start, previous plan and last warning.
#[derive(Debug, Clone)]
pub struct AdvisorySession {
    pub cfg: MpcConfig,
    warm: Option<(DVector<f64>, DVector<f64>)>,
    prev_plan: Option<PlannedTrajectory>,
    prev_stopping: bool,
    last: Option<WarningSignal>,
}

const RELAX_ORDER: [RowGroup; 2] = [RowGroup::MaxSpacing, RowGroup::RedHeadway];

impl AdvisorySession {
    pub fn new(cfg: MpcConfig) -> Self {
        Self { cfg, warm: None, prev_plan: None, prev_stopping: false, last: None }
    }

    pub fn last_warning(&self) -> Option<WarningSignal> {
        self.last
    }

    fn reference(&self, t0: f64, init: &VehicleState, n: usize, stopping: bool, stop_bar: f64) -> Vec<f64> {
        let cfg = &self.cfg;
        (1..=n)
            .map(|k| {
                let t = t0 + k as f64 * cfg.mpc_dt;
                let x = match &self.prev_plan {
                    Some(plan) => plan.position_at(t),
                    None => init.position + (t - t0) * init.speed,
                };
                reference_speed(x, stopping, stop_bar, cfg.free_flow_speed, cfg.ref_steepness, cfg.ref_offset)
            })
            .collect()
    }

    fn plan_terminal(
        &self,
        mode: ConstraintMode,
        t0: f64,
        state: &VehicleState,
        ego_pred: &PredictedTrajectory,
        signal: &SignalTimeline,
        choice: HorizonChoice,
    ) -> ConstraintMode {
        let cfg = &self.cfg;
        let t_f = t0 + choice.horizon;
        let target = signal.stop_bar_m - choice.d_tl;
        let x_hat = match (&self.prev_plan, self.prev_stopping) {
            (Some(plan), true) => plan.position_at(t_f),
            _ => ego_pred.sample(t_f).0,
        };
        let reachable = state.position + max_stop_distance(state.speed, choice.horizon, cfg.a_max, -cfg.a_min, cfg.v_max) >= target;
        let terminal = signal.phase_at(t_f) == Phase::Red && x_hat >= target && reachable;
        match mode {
            ConstraintMode::NoLeadRed | ConstraintMode::NoLeadRedTerminal if terminal => ConstraintMode::NoLeadRedTerminal,
            ConstraintMode::NoLeadRed | ConstraintMode::NoLeadRedTerminal => ConstraintMode::NoLeadRed,
            ConstraintMode::LeadPasses { .. } => ConstraintMode::LeadPasses { terminal },
            m => m,
        }
    }

    /// One advisory update at time `t0`.
    pub fn compute_warning(
        &mut self,
        t0: f64,
        state: &VehicleState,
        ego_pred: &PredictedTrajectory,
        lead: Option<&LeadPrediction>,
        signal: &SignalTimeline,
    ) -> Result<WarningOutcome, WarningError> {
        let cfg = self.cfg.clone();
        let choice = horizon_schedule((signal.stop_bar_m - state.position).max(0.0));
        let mut mode = select_mode(ego_pred, lead.map(|l| &l.traj), signal, &cfg, t0, choice);
        let distance = signal.stop_bar_m - state.position;
        if mode.stopping() && distance > 0.0 && state.speed * state.speed / (-2.0 * cfg.a_min) > distance {
            debug!(t0, distance, "stop no longer possible; committing to cross");
            mode = if lead.is_some() { ConstraintMode::LeadFollow } else { ConstraintMode::NoLeadNoRed };
        }
        if cfg.terminal_trigger == TerminalTrigger::Plan {
            mode = self.plan_terminal(mode, t0, state, ego_pred, signal, choice);
        }
        let n = step_count(choice.horizon, cfg.mpc_dt)?;
        let reference = self.reference(t0, state, n, mode.stopping(), signal.stop_bar_m);

        let mut relaxed: Vec<RowGroup> = Vec::new();
        let input = TranscriptionInput { t0, choice, reference: &reference, relaxed: &relaxed };
        let base = transcribe(&cfg, state, lead, signal, mode, &input)?;
        let brake = extreme_profile(state, n, &cfg, true);
        let accel = extreme_profile(state, n, &cfg, false);
        if violated(&base, RowGroup::MinSpacing, &brake) {
            warn!(t0, "spacing rows unreachable even at full braking; issuing the strongest warning");
            return Ok(self.fallback(SolveStatus::PrimalInfeasible, KktResiduals::default(), 0, mode, choice, relaxed));
        }
        let doomed = |g: RowGroup| match g {
            RowGroup::MaxSpacing => violated(&base, g, &accel),
            _ => violated(&base, g, &brake),
        };
        if let Some(last) = RELAX_ORDER.iter().rposition(|&g| doomed(g)) {
            relaxed.extend(RELAX_ORDER[..=last].iter().filter(|g| base.row_groups.contains(g)));
            debug!(t0, ?relaxed, "constraint groups unreachable; relaxing up front");
        }
        loop {
            let input = TranscriptionInput { t0, choice, reference: &reference, relaxed: &relaxed };
            let problem = transcribe(&cfg, state, lead, signal, mode, &input)?;
            let warm = self
                .warm
                .as_ref()
                .filter(|(x, y)| x.len() == problem.num_vars() && y.len() == problem.num_rows())
                .map(|(x, y)| (x, y));
            let sol = qp_core::solve_qp_warm(&problem, &cfg.solver, warm)?;
            if sol.status == SolveStatus::Solved {
                let u: Vec<f64> = sol.x.rows(0, n).iter().copied().collect();
                let plan = PlannedTrajectory::rollout(t0, state, &u, &cfg);
                let (lo, hi) = (cfg.u_min, cfg.u_max);
                let signal_out = classify(u[0].clamp(lo, hi));
                debug!(t0, ?mode, u0 = u[0], iterations = sol.iterations, "advisory solved");
                self.warm = Some((sol.x.clone(), sol.y.clone()));
                self.prev_plan = Some(plan.clone());
                self.prev_stopping = mode.stopping();
                self.last = Some(signal_out);
                return Ok(WarningOutcome {
                    signal: signal_out,
                    plan,
                    mode,
                    choice,
                    stale: false,
                    relaxed,
                    status: sol.status,
                    kkt: sol.kkt,
                    iterations: sol.iterations,
                });
            }
            let next = RELAX_ORDER.iter().copied().find(|g| !relaxed.contains(g) && problem.row_groups.contains(g));
            match next {
                Some(group) => {
                    warn!(t0, ?group, status = ?sol.status, "relaxing constraint group");
                    relaxed.push(group);
                }
                None => {
                    warn!(t0, status = ?sol.status, "advisory solve failed");
                    return Ok(self.fallback(sol.status, sol.kkt, sol.iterations, mode, choice, relaxed));
                                }
            }
        }
    }
}

impl AdvisorySession {
    /// Outcome when no solve succeeded: the strongest warning if the spacing
    /// rows cannot be met, otherwise the previous warning.
    fn fallback(
        &mut self,
        status: SolveStatus,
        kkt: KktResiduals,
        iterations: usize,
        mode: ConstraintMode,
        choice: HorizonChoice,
        relaxed: Vec<RowGroup>,
    ) -> WarningOutcome {
        self.warm = None;
        let held = if status == SolveStatus::PrimalInfeasible && mode.min_spacing() {
            classify(self.cfg.effective_u_bounds().1)
        } else {
            self.last.unwrap_or_else(|| classify(0.0))
        };
        self.last = Some(held);
        WarningOutcome {
            signal: held,
            plan: self.prev_plan.clone().unwrap_or_default(),
            mode,
            choice,
            stale: true,
            relaxed,
            status,
            kkt,
            iterations,
        }
    }
}

/// Warning sequence that brakes (or accelerates) as hard as the input box
/// allows, stopping at the speed bound the transcription uses. It minimises
/// (maximises) position and speed at every step simultaneously.
fn extreme_profile(init: &VehicleState, n: usize, cfg: &MpcConfig, brake: bool) -> DVector<f64> {
    let (u_lo, u_hi) = cfg.effective_u_bounds();
    let v_floor = cfg.v_min.min(init.speed);
    let v_ceil = cfg.v_max.max(init.speed);
    let mut v = init.speed;
    let mut u = DVector::zeros(n);
    for k in 0..n {
        let target = if brake { (v + cfg.mpc_dt * u_hi / -cfg.driver_gain).max(v_floor) } else { (v - cfg.mpc_dt * u_lo / cfg.driver_gain).min(v_ceil) };
        u[k] = (v - target) * cfg.driver_gain / cfg.mpc_dt;
        v = target;
    }
    u
}

/// Whether a row of `group` is violated by the warning sequence `u` with all
/// slack variables at zero.
fn violated(problem: &QpProblem, group: RowGroup, u: &DVector<f64>) -> bool {
    let n = u.len();
    (0..problem.num_rows()).filter(|&i| problem.row_groups[i] == group).any(|i| {
        let row = problem.constraints.row(i);
        let value = (row.columns(0, n) * u)[0];
        let tol = 1e-6 * (1.0 + value.abs());
        value > problem.upper[i] + tol || value < problem.lower[i] - tol
    })
}

/// Furthest distance covered in `horizon` by a profile that accelerates at
/// `accel` (capped at `v_max`) and then brakes at `decel` to a standstill
/// exactly at the end; negative infinity when no stop fits in the horizon.
pub fn max_stop_distance(v: f64, horizon: f64, accel: f64, decel: f64, v_max: f64) -> f64 {
    let v = v.max(0.0);
    if v / decel > horizon {
        return f64::NEG_INFINITY;
    }
    // peak speed reached when accelerating for the whole time budget
    let peak = (decel * (v + accel * horizon)) / (accel + decel);
    let peak = peak.min(v_max.max(v));
    let t_up = (peak - v) / accel;
    let t_down = peak / decel;
    let cruise = (horizon - t_up - t_down).max(0.0);
    (peak * peak - v * v) / (2.0 * accel) + peak * cruise + peak * peak / (2.0 * decel)
}

/// Single-stage kinematic warning: warn when the vehicle cannot reach the
/// stop bar before the signal turns red at its current speed.
pub fn baseline_warning(state: &VehicleState, signal: &SignalTimeline, comm_range: f64, t: f64) -> bool {
    let distance = signal.stop_bar_m - state.position;
    if distance < 0.0 || distance > comm_range {
        return false;
    }
    let t_rem = signal.time_to_red(t);
    if state.speed <= 0.0 {
        return t_rem.is_finite();
    }
    distance / state.speed > t_rem
}

pub const DEFAULT_COMM_RANGE: f64 = 500.0;
