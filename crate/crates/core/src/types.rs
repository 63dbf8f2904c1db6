use std::fmt;

use serde::{Deserialize, Serialize};

/// Simulation time in integer microseconds.
pub type Micros = u64;

pub const MICROS_PER_SECOND: f64 = 1_000_000.0;

pub fn micros_to_secs(t: Micros) -> f64 {
    t as f64 / MICROS_PER_SECOND
}

/// Converts seconds to microseconds, rounding to the nearest tick.
pub fn secs_to_micros(s: f64) -> Micros {
    (s * MICROS_PER_SECOND).round() as Micros
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}
