//! Fixed-time signal plans.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Green,
    Yellow,
    Red,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Green => "green",
            Phase::Yellow => "yellow",
            Phase::Red => "red",
        }
    }
}

/// A cyclic green, yellow, red plan for one approach.
///
/// `offset_s` is how far into the cycle (counted from green onset) the
/// plan is at `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTimeline {
    pub stop_bar_m: f64,
    pub green_s: f64,
    pub yellow_s: f64,
    pub red_s: f64,
    pub offset_s: f64,
}

impl SignalTimeline {
    pub fn cycle(&self) -> f64 {
        self.green_s + self.yellow_s + self.red_s
    }

    fn cycle_time(&self, t: f64) -> f64 {
        (t + self.offset_s).rem_euclid(self.cycle())
    }

    pub fn phase_at(&self, t: f64) -> Phase {
        let c = self.cycle_time(t);
        if c < self.green_s {
            Phase::Green
        } else if c < self.green_s + self.yellow_s {
            Phase::Yellow
        } else {
            Phase::Red
        }
    }

    /// Seconds from `t` until the next red onset; zero while red.
    pub fn time_to_red(&self, t: f64) -> f64 {
        let c = self.cycle_time(t);
        let onset = self.green_s + self.yellow_s;
        if c >= onset {
            0.0
        } else {
            onset - c
        }
    }

    /// Seconds from `t` until the current phase ends.
    pub fn time_in_phase_remaining(&self, t: f64) -> f64 {
        let c = self.cycle_time(t);
        if c < self.green_s {
            self.green_s - c
        } else if c < self.green_s + self.yellow_s {
            self.green_s + self.yellow_s - c
        } else {
            self.cycle() - c
        }
    }

    /// Absolute time of the first yellow onset strictly after or at `t`.
    pub fn next_yellow_onset(&self, t: f64) -> f64 {
        let c = self.cycle_time(t);
        if c <= self.green_s {
            t + self.green_s - c
        } else {
            t + self.cycle() - c + self.green_s
        }
    }
}
