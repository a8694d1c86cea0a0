use serde::{Deserialize, Serialize};

/// Longitudinal state of one vehicle. Positions are measured along the
/// approach with the stop bar at 0 and upstream negative; `position` is the
/// front bumper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
    pub length: f64,
    pub connected: bool,
    pub is_ego: bool,
}

impl VehicleState {
    pub fn rear(&self) -> f64 {
        self.position - self.length
    }
}
