//! Wire format shared with the driver console. Every message is one JSON
//! object in one WebSocket text message, carrying the protocol version `v`
//! and a `type` tag.

use redlight_core::signal::Phase;
use redlight_core::warning_mpc::{WarningColor, WarningSignal};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

pub const MIN_PACE: f64 = 0.25;
pub const MAX_PACE: f64 = 4.0;

fn default_pace() -> f64 {
    1.0
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    Open {
        scenario: String,
        #[serde(default)]
        seed: u64,
        /// Simulated seconds per wall-clock second.
        #[serde(default = "default_pace")]
        pace: f64,
    },
    /// Pedal fractions in [0, 1]; brake wins when both are pressed.
    Pedal { throttle: f64, brake: f64 },
    Pause,
    Resume,
    /// Restarts the open scenario from t = 0 with the same seed.
    Reset,
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    pub v: u32,
    #[serde(flatten)]
    pub command: Command,
}

impl ClientMessage {
    pub fn new(command: Command) -> Self {
        Self { v: PROTOCOL_VERSION, command }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleView {
    pub id: u32,
    /// Front bumper, m, stop bar at 0.
    pub x_m: f64,
    pub v_mps: f64,
    pub a_mps2: f64,
    pub length_m: f64,
    pub ego: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarningView {
    pub u: f64,
    pub color: WarningColor,
    pub diameter_fraction: f64,
}

impl From<WarningSignal> for WarningView {
    fn from(w: WarningSignal) -> Self {
        Self { u: w.u, color: w.color, diameter_fraction: w.diameter_fraction }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanPoint {
    pub t_s: f64,
    pub x_m: f64,
    pub v_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedalView {
    pub throttle: f64,
    pub brake: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Counts frames within the connection, starting at 0.
    pub seq: u64,
    /// Incremented by every reset.
    pub episode: u32,
    pub scenario: String,
    pub t_s: f64,
    pub phase: Phase,
    pub stop_bar_m: f64,
    pub vehicles: Vec<VehicleView>,
    pub warning: WarningView,
    pub plan: Vec<PlanPoint>,
    pub stale: bool,
    pub paused: bool,
    pub pedal: PedalView,
    /// Latched once the ego has entered the intersection on red.
    pub red_violation: bool,
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Frame(Frame),
    Error { message: String },
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub v: u32,
    #[serde(flatten)]
    pub event: Event,
}

impl ServerMessage {
    pub fn new(event: Event) -> Self {
        Self { v: PROTOCOL_VERSION, event }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Self::new(Event::Error { message: message.into() })
    }
}

/// Parses a client message, rejecting other protocol versions.
pub fn parse_command(text: &str) -> Result<Command, String> {
    let msg: ClientMessage = serde_json::from_str(text).map_err(|e| format!("malformed command: {e}"))?;
    if msg.v != PROTOCOL_VERSION {
        return Err(format!("unsupported protocol version {}; this server speaks {PROTOCOL_VERSION}", msg.v));
    }
    Ok(msg.command)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: &'static str,
    pub sessions: usize,
}
