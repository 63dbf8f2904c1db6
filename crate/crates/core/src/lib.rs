//! Discrete-event simulator of a duty-cycled MAC with station-assisted
//! cooperative transmission for multi-hop sensor networks.

pub mod cli;
pub mod config;
pub mod energy;
pub mod engine;
pub mod error;
pub mod mac;
pub mod rng;
pub mod selection;
pub mod trace;
pub mod types;

pub use config::{parse_config, ScenarioConfig};
pub use energy::{crossover_distance, rx_energy, tx_energy, Battery, RadioEnergyParams};
pub use engine::{run, run_in_memory, Metrics};
pub use error::{ConfigError, SelectionError, SimError};
pub use types::{Micros, NodeId, Position};
