//! First-order radio energy model and per-node battery bookkeeping.
//!
//! Transmission cost has two regimes split at the crossover distance
//! `d0 = sqrt(e_fs / e_mp)`: a free-space `d^2` amplifier below it and a
//! multipath `d^4` amplifier at or above it. Reception is charged per bit,
//! idle listening at the receive power draw and sleep at `p_sleep`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Radio energy constants. All fields are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioEnergyParams {
    /// Electronics energy per bit, transmit side (J/bit).
    pub e_elec: f64,
    /// Free-space amplifier coefficient (J/bit/m^2).
    pub e_fs: f64,
    /// Multipath amplifier coefficient (J/bit/m^4).
    pub e_mp: f64,
    /// Energy per received bit (J/bit).
    pub e_rx: f64,
    /// Receive power draw (W). Idle listening draws the same.
    pub p_rx: f64,
    /// Sleep power draw (W).
    pub p_sleep: f64,
}

impl Default for RadioEnergyParams {
    fn default() -> Self {
        Self {
            e_elec: 50e-9,
            e_fs: 10e-12,
            e_mp: 0.0013e-12,
            e_rx: 50e-9,
            p_rx: 1e-3,
            p_sleep: 1e-8,
        }
    }
}

impl RadioEnergyParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("radio.e_elec", self.e_elec),
            ("radio.e_fs", self.e_fs),
            ("radio.e_mp", self.e_mp),
            ("radio.e_rx", self.e_rx),
            ("radio.p_rx", self.p_rx),
            ("radio.p_sleep", self.p_sleep),
        ];
        for (path, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::invalid(
                    path,
                    "must be finite and strictly positive",
                ));
            }
        }
        let d0 = crossover_distance(self);
        if !(d0.is_finite() && d0 > 0.0) {
            return Err(ConfigError::invalid(
                "radio",
                "crossover distance sqrt(e_fs/e_mp) is not finite",
            ));
        }
        Ok(())
    }

    /// Idle-listening power, defined equal to the receive power.
    pub fn p_idle(&self) -> f64 {
        self.p_rx
    }
}

/// Distance at which the amplifier model switches from `d^2` to `d^4`.
pub fn crossover_distance(params: &RadioEnergyParams) -> f64 {
    (params.e_fs / params.e_mp).sqrt()
}

/// Energy to transmit `bits` over `distance` metres.
pub fn tx_energy(bits: u64, distance: f64, params: &RadioEnergyParams) -> f64 {
    let l = bits as f64;
    if distance >= crossover_distance(params) {
        l * params.e_elec + l * params.e_mp * distance.powi(4)
    } else {
        l * params.e_elec + l * params.e_fs * distance.powi(2)
    }
}

pub fn rx_energy(bits: u64, params: &RadioEnergyParams) -> f64 {
    bits as f64 * params.e_rx
}

/// Energy spent idle listening for `duration` seconds.
pub fn idle_energy(duration: f64, params: &RadioEnergyParams) -> f64 {
    duration * params.p_idle()
}

pub fn sleep_energy(duration: f64, params: &RadioEnergyParams) -> f64 {
    duration * params.p_sleep
}

/// What a unit of drained energy was spent on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Transmit,
    Receive,
    IdleListen,
    Sleep,
    Overhear,
}

impl Activity {
    pub const ALL: [Activity; 5] = [
        Activity::Transmit,
        Activity::Receive,
        Activity::IdleListen,
        Activity::Sleep,
        Activity::Overhear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Activity::Transmit => "transmit",
            Activity::Receive => "receive",
            Activity::IdleListen => "idle_listen",
            Activity::Sleep => "sleep",
            Activity::Overhear => "overhear",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Energy consumed per [`Activity`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CategoryTotals([f64; 5]);

impl CategoryTotals {
    pub fn get(&self, activity: Activity) -> f64 {
        self.0[activity.index()]
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Activity, f64)> + '_ {
        Activity::ALL.iter().map(move |a| (*a, self.get(*a)))
    }

    fn add(&mut self, activity: Activity, amount: f64) {
        self.0[activity.index()] += amount;
    }
}

/// Outcome of a single [`Battery::drain`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drawn {
    /// Energy actually taken from the battery.
    pub amount: f64,
    /// The battery was already dead; nothing was drawn.
    pub was_dead: bool,
    /// This draw emptied the battery.
    pub died: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Battery {
    initial: f64,
    residual: f64,
    consumed: CategoryTotals,
    alive: bool,
}

impl Battery {
    pub fn new(initial: f64) -> Self {
        assert!(
            initial.is_finite() && initial >= 0.0,
            "battery capacity must be finite and non-negative"
        );
        Self {
            initial,
            residual: initial,
            consumed: CategoryTotals::default(),
            alive: initial > 0.0,
        }
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn alive(&self) -> bool {
        self.alive
    }

    pub fn consumed(&self) -> &CategoryTotals {
        &self.consumed
    }

    /// Draws `min(amount, residual)` and books it under `activity`.
    ///
    /// A dead battery is left untouched and the result is flagged
    /// `was_dead`. Reaching zero kills the battery permanently.
    pub fn drain(&mut self, amount: f64, activity: Activity) -> Drawn {
        debug_assert!(amount >= 0.0 && amount.is_finite(), "drain amount {amount}");
        if !self.alive {
            return Drawn {
                amount: 0.0,
                was_dead: true,
                died: false,
            };
        }
        let drawn = amount.min(self.residual);
        self.residual -= drawn;
        self.consumed.add(activity, drawn);
        let died = self.residual <= 0.0;
        if died {
            self.residual = 0.0;
            self.alive = false;
        }
        Drawn {
            amount: drawn,
            was_dead: false,
            died,
        }
    }
}

/// Value-returning form of [`Battery::drain`].
pub fn drain(battery: &Battery, amount: f64, activity: Activity) -> Battery {
    let mut next = battery.clone();
    next.drain(amount, activity);
    next
}
