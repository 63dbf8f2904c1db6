use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEnergy {
    pub node: NodeId,
    pub role: String,
    pub initial_j: f64,
    pub residual_j: f64,
    /// Drawn energy per activity: transmit, receive, idle_listen, sleep, overhear.
    pub consumed_j: BTreeMap<String, f64>,
    pub death_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSample {
    pub t_s: f64,
    pub node: NodeId,
    pub residual_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub config_sha256: String,
    pub seed: u64,
    pub mode: String,
    /// Time of the first sensor-node death; `None` if every node survived.
    pub network_lifetime_first_death_s: Option<f64>,
    pub first_dead_node: Option<NodeId>,
    /// Earliest death among traffic sources.
    pub trn_death_time_s: Option<f64>,
    pub packets_offered: u64,
    pub packets_delivered: u64,
    pub packets_dropped: u64,
    pub delivery_ratio: f64,
    pub collisions: u64,
    pub ct_sessions: u64,
    pub noct_sessions: u64,
    /// Equals the number of trace records.
    pub events_processed: u64,
    pub end_time_s: f64,
    pub energy_by_category_j: BTreeMap<String, f64>,
    pub energy_by_node: Vec<NodeEnergy>,
    pub timeline: Vec<TimelineSample>,
}

impl Metrics {
    /// First death, or the end of the run when nobody died.
    pub fn lifetime_s(&self) -> (f64, bool) {
        match self.network_lifetime_first_death_s {
            Some(t) => (t, false),
            None => (self.end_time_s, true),
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeEnergy> {
        self.energy_by_node.iter().find(|n| n.node == id)
    }
}
