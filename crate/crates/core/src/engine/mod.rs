//! Discrete-event core: queue, topology, channel, metrics and the run loop.

pub mod channel;
pub mod metrics;
pub mod queue;
pub mod sim;
pub mod topology;

pub use metrics::Metrics;
pub use sim::{run, run_in_memory, Simulation};
pub use topology::Topology;
