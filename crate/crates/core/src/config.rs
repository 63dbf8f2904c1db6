//! Scenario configuration: JSON parsing, defaults, validation and hashing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::energy::RadioEnergyParams;
use crate::error::ConfigError;
use crate::mac::{MacConfig, ModeSetting, SUB_SLOTS_PER_SLOT};
use crate::types::{secs_to_micros, Micros, MICROS_PER_SECOND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub radio: RadioEnergyParams,
    pub topology: TopologySpec,
    #[serde(default)]
    pub traffic: TrafficSpec,
    #[serde(default)]
    pub mac: MacSpec,
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
    /// End the run once all traffic is delivered or dropped.
    #[serde(default)]
    pub stop_when_idle: bool,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_horizon() -> f64 {
    3600.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Trn,
    Relay,
    HelperCapable,
    Fr,
    Wilem,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Trn => "trn",
            Role::Relay => "relay",
            Role::HelperCapable => "helper_capable",
            Role::Fr => "fr",
            Role::Wilem => "wilem",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery_j: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_hop: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Sensor nodes including the final receiver; the station is extra.
    pub node_count: u32,
    pub width: f64,
    pub height: f64,
    /// Placement seed; the run seed is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_trn_count")]
    pub trn_count: u32,
}

fn default_trn_count() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default = "default_base_range")]
    pub base_range_m: f64,
    #[serde(default = "default_initial_energy")]
    pub initial_energy_j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<NodeSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

fn default_base_range() -> f64 {
    90.0
}

fn default_initial_energy() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficSpec {
    pub packet_size_bytes: u32,
    pub packets_per_source: u32,
    pub interval_s: f64,
    pub start_s: f64,
    /// Each arrival is delayed by a uniform draw from `[0, jitter_s)`.
    pub jitter_s: f64,
    /// Source node ids; every TRN when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<u32>>,
}

impl Default for TrafficSpec {
    fn default() -> Self {
        Self {
            packet_size_bytes: 100,
            packets_per_source: 10,
            interval_s: 10.0,
            start_s: 0.0,
            jitter_s: 0.0,
            sources: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacSpec {
    pub frame_length_s: f64,
    pub active_window_s: f64,
    pub slot_duration_s: f64,
    /// Defaults to two slot durations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
    pub retry_cap: u32,
    pub mode: ModeSetting,
    pub auto_residual_fraction: f64,
    pub control_bits: u64,
    pub superframe_bits: u64,
}

impl Default for MacSpec {
    fn default() -> Self {
        Self {
            frame_length_s: 1.0,
            active_window_s: 0.02,
            slot_duration_s: 0.004,
            timeout_s: None,
            retry_cap: 3,
            mode: ModeSetting::Auto,
            auto_residual_fraction: 0.5,
            control_bits: 64,
            superframe_bits: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<String>,
    pub timeline_interval_s: f64,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            trace: None,
            metrics: None,
            timeline_interval_s: 60.0,
        }
    }
}

/// Parses and validates a scenario document.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "$".to_string() } else { path };
        ConfigError::invalid(path, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(
            path,
            "must be finite and strictly positive",
        ))
    }
}

fn non_negative(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(
            path,
            "must be finite and non-negative",
        ))
    }
}

/// Exact conversion to whole microseconds.
fn whole_micros(path: &str, s: f64) -> Result<Micros, ConfigError> {
    let us = s * MICROS_PER_SECOND;
    if (us - us.round()).abs() > 1e-6 {
        return Err(ConfigError::invalid(
            path,
            "must be a whole number of microseconds",
        ));
    }
    Ok(us.round() as Micros)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.radio.validate()?;
        self.validate_topology()?;
        self.validate_traffic()?;
        self.mac_config()?;
        positive("horizon_s", self.horizon_s)?;
        positive(
            "output.timeline_interval_s",
            self.output.timeline_interval_s,
        )?;
        Ok(())
    }

    fn validate_topology(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        positive("topology.base_range_m", t.base_range_m)?;
        positive("topology.initial_energy_j", t.initial_energy_j)?;
        match (&t.nodes, &t.generator) {
            (Some(_), Some(_)) => Err(ConfigError::invalid(
                "topology",
                "`nodes` and `generator` are mutually exclusive",
            )),
            (None, None) => Err(ConfigError::invalid(
                "topology",
                "one of `nodes` or `generator` is required",
            )),
            (None, Some(g)) => {
                if g.node_count < 2 {
                    return Err(ConfigError::invalid(
                        "topology.generator.node_count",
                        "must be at least 2",
                    ));
                }
                positive("topology.generator.width", g.width)?;
                positive("topology.generator.height", g.height)?;
                if g.trn_count == 0 || g.trn_count >= g.node_count {
                    return Err(ConfigError::invalid(
                        "topology.generator.trn_count",
                        "must be in [1, node_count - 1]",
                    ));
                }
                Ok(())
            }
            (Some(nodes), None) => validate_nodes(nodes),
        }
    }

    fn validate_traffic(&self) -> Result<(), ConfigError> {
        let t = &self.traffic;
        if t.packet_size_bytes == 0 {
            return Err(ConfigError::invalid(
                "traffic.packet_size_bytes",
                "must be positive",
            ));
        }
        positive("traffic.interval_s", t.interval_s)?;
        non_negative("traffic.start_s", t.start_s)?;
        non_negative("traffic.jitter_s", t.jitter_s)?;
        if let (Some(sources), Some(nodes)) = (&t.sources, &self.topology.nodes) {
            let ids: BTreeMap<u32, Role> = nodes.iter().map(|n| (n.id, n.role)).collect();
            for (i, s) in sources.iter().enumerate() {
                match ids.get(s) {
                    None => {
                        return Err(ConfigError::invalid(
                            format!("traffic.sources[{i}]"),
                            format!("unknown node {s}"),
                        ))
                    }
                    Some(Role::Fr | Role::Wilem) => {
                        return Err(ConfigError::invalid(
                            format!("traffic.sources[{i}]"),
                            "must be a sensor node",
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Run-time MAC parameters in microseconds.
    pub fn mac_config(&self) -> Result<MacConfig, ConfigError> {
        let m = &self.mac;
        positive("mac.frame_length_s", m.frame_length_s)?;
        positive("mac.active_window_s", m.active_window_s)?;
        positive("mac.slot_duration_s", m.slot_duration_s)?;
        let frame = whole_micros("mac.frame_length_s", m.frame_length_s)?;
        let active = whole_micros("mac.active_window_s", m.active_window_s)?;
        let slot = whole_micros("mac.slot_duration_s", m.slot_duration_s)?;
        if slot == 0 || slot % SUB_SLOTS_PER_SLOT != 0 {
            return Err(ConfigError::invalid(
                "mac.slot_duration_s",
                "must be a positive multiple of 4 us",
            ));
        }
        if active < slot || active % slot != 0 {
            return Err(ConfigError::invalid(
                "mac.active_window_s",
                "must be a whole number of slots",
            ));
        }
        if frame < active || frame % active != 0 {
            return Err(ConfigError::invalid(
                "mac.frame_length_s",
                "must be a whole number of active windows",
            ));
        }
        let timeout = match m.timeout_s {
            Some(t) => {
                positive("mac.timeout_s", t)?;
                whole_micros("mac.timeout_s", t)?
            }
            None => 2 * slot,
        };
        let q = slot / SUB_SLOTS_PER_SLOT;
        if timeout < 2 * q || timeout % q != 0 {
            return Err(ConfigError::invalid(
                "mac.timeout_s",
                "must be a multiple of a quarter slot and at least half a slot",
            ));
        }
        if !(m.auto_residual_fraction.is_finite() && m.auto_residual_fraction >= 0.0) {
            return Err(ConfigError::invalid(
                "mac.auto_residual_fraction",
                "must be finite and non-negative",
            ));
        }
        if m.control_bits == 0 {
            return Err(ConfigError::invalid("mac.control_bits", "must be positive"));
        }
        if m.superframe_bits == 0 {
            return Err(ConfigError::invalid(
                "mac.superframe_bits",
                "must be positive",
            ));
        }
        Ok(MacConfig {
            frame,
            active,
            slot,
            timeout,
            retry_cap: m.retry_cap,
            mode: m.mode,
            auto_residual_fraction: m.auto_residual_fraction,
            control_bits: m.control_bits,
            superframe_bits: m.superframe_bits,
            data_bytes: self.traffic.packet_size_bytes,
        })
    }

    pub fn horizon(&self) -> Micros {
        secs_to_micros(self.horizon_s)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the key-sorted compact JSON of the effective config.
    pub fn hash(&self) -> String {
        canonical_hash(&self.to_value())
    }

    /// [`Self::hash`] with `mac.mode` removed.
    pub fn hash_without_mode(&self) -> String {
        let mut v = self.to_value();
        if let Some(mac) = v.get_mut("mac").and_then(Value::as_object_mut) {
            mac.remove("mode");
        }
        canonical_hash(&v)
    }
}

fn validate_nodes(nodes: &[NodeSpec]) -> Result<(), ConfigError> {
    let mut ids = BTreeSet::new();
    let mut fr = 0;
    let mut wilem = 0;
    for (i, n) in nodes.iter().enumerate() {
        let at = |field: &str| format!("topology.nodes[{i}].{field}");
        if !ids.insert(n.id) {
            return Err(ConfigError::invalid(
                at("id"),
                format!("duplicate node id {}", n.id),
            ));
        }
        if !(n.x.is_finite() && n.y.is_finite()) {
            return Err(ConfigError::invalid(at("x"), "position must be finite"));
        }
        if let Some(b) = n.battery_j {
            positive(&at("battery_j"), b)?;
        }
        match n.role {
            Role::Fr => fr += 1,
            Role::Wilem => wilem += 1,
            _ => {}
        }
        if matches!(n.role, Role::Fr | Role::Wilem) && n.next_hop.is_some() {
            return Err(ConfigError::invalid(
                at("next_hop"),
                "the final receiver and the station do not forward",
            ));
        }
    }
    if fr != 1 {
        return Err(ConfigError::invalid(
            "topology.nodes",
            format!("exactly one `fr` node required, found {fr}"),
        ));
    }
    if wilem != 1 {
        return Err(ConfigError::invalid(
            "topology.nodes",
            format!("exactly one `wilem` node required, found {wilem}"),
        ));
    }
    let roles: BTreeMap<u32, Role> = nodes.iter().map(|n| (n.id, n.role)).collect();
    for (i, n) in nodes.iter().enumerate() {
        if let Some(h) = n.next_hop {
            match roles.get(&h) {
                None => {
                    return Err(ConfigError::invalid(
                        format!("topology.nodes[{i}].next_hop"),
                        format!("unknown node {h}"),
                    ))
                }
                Some(Role::Wilem) => {
                    return Err(ConfigError::invalid(
                        format!("topology.nodes[{i}].next_hop"),
                        "the station is not a relay",
                    ))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

pub fn canonical_hash(v: &Value) -> String {
    // serde_json's default map is ordered, so this is key-sorted.
    let text = serde_json::to_string(v).expect("value serialises");
    hex::encode(Sha256::digest(text.as_bytes()))
}
