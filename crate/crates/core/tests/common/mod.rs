#![allow(dead_code)]

use std::collections::BTreeMap;

use oscmac::config::{parse_config, ScenarioConfig};
use oscmac::engine::Topology;
use oscmac::trace::{parse_trace, TraceRecord};
use oscmac::{Metrics, NodeId, Position};

pub fn config(text: &str) -> ScenarioConfig {
    parse_config(text).unwrap_or_else(|e| panic!("bad test scenario: {e}"))
}

/// Transmitter with two helpers 10 m away and the final receiver 120 m out.
pub fn range_extension(mode: &str, packets: u32) -> ScenarioConfig {
    config(&format!(
        r#"{{
        "topology": {{"base_range_m": 90.0, "nodes": [
            {{"id": 0, "x": 120.0, "y": 0.0, "role": "fr"}},
            {{"id": 1, "x": 0.0, "y": 0.0, "role": "trn", "next_hop": 0}},
            {{"id": 2, "x": 8.0, "y": 6.0, "role": "helper_capable"}},
            {{"id": 3, "x": 8.0, "y": -6.0, "role": "helper_capable"}},
            {{"id": 4, "x": 60.0, "y": 40.0, "role": "wilem"}}]}},
        "traffic": {{"packets_per_source": {packets}, "interval_s": 10.0}},
        "mac": {{"mode": "{mode}"}},
        "horizon_s": 120.0
    }}"#
    ))
}

/// One sender 50 m from the final receiver.
pub fn two_node(mode: &str, packets: u32) -> ScenarioConfig {
    config(&format!(
        r#"{{
        "topology": {{"nodes": [
            {{"id": 0, "x": 0.0, "y": 0.0, "role": "fr"}},
            {{"id": 1, "x": 50.0, "y": 0.0, "role": "trn"}},
            {{"id": 2, "x": 0.0, "y": 200.0, "role": "wilem"}}]}},
        "traffic": {{"packets_per_source": {packets}, "interval_s": 10.0}},
        "mac": {{"mode": "{mode}"}},
        "horizon_s": 30.0
    }}"#
    ))
}

/// Two senders on opposite sides of the receiver, out of each other's
/// range, contending for it in the same window.
pub fn hidden_pair() -> ScenarioConfig {
    config(
        r#"{
        "topology": {"nodes": [
            {"id": 0, "x": 0.0, "y": 0.0, "role": "fr"},
            {"id": 1, "x": 50.0, "y": 0.0, "role": "trn"},
            {"id": 3, "x": -50.0, "y": 0.0, "role": "trn"},
            {"id": 2, "x": 0.0, "y": 200.0, "role": "wilem"}]},
        "traffic": {"packets_per_source": 1},
        "mac": {"mode": "noct"},
        "horizon_s": 5.0
    }"#,
    )
}

pub fn generated(nodes: u32, side: f64, horizon_s: f64, mode: &str) -> ScenarioConfig {
    config(&format!(
        r#"{{
        "topology": {{"generator": {{"node_count": {nodes}, "width": {side}, "height": {side}, "trn_count": 5}}}},
        "traffic": {{"packets_per_source": 100, "interval_s": 97.0, "jitter_s": 3.0}},
        "mac": {{"mode": "{mode}"}},
        "horizon_s": {horizon_s},
        "output": {{"timeline_interval_s": 100.0}}
    }}"#
    ))
}

pub fn records(trace: &str) -> Vec<TraceRecord> {
    parse_trace(trace).expect("trace parses").records
}

const SLEEPLESS: [&str; 4] = ["transmit", "receive", "overhear", "collision"];

/// Checks every trace-level invariant against the metrics of the same run.
/// Returns a list of violations.
pub fn audit(trace: &str, metrics: &Metrics) -> Vec<String> {
    let mut problems = Vec::new();
    let recs = records(trace);
    if recs.len() as u64 != metrics.events_processed {
        problems.push(format!(
            "{} records but {} events processed",
            recs.len(),
            metrics.events_processed
        ));
    }
    let mut last_time = 0;
    let mut charged: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut last_residual: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut dead_at: BTreeMap<NodeId, u64> = BTreeMap::new();
    for (i, r) in recs.iter().enumerate() {
        if r.seq != i as u64 {
            problems.push(format!("record {i} has seq {}", r.seq));
        }
        if r.time_us < last_time {
            problems.push(format!("time goes back at seq {}", r.seq));
        }
        last_time = r.time_us;
        let Some(node) = r.node else { continue };
        if let Some(t) = dead_at.get(&node) {
            problems.push(format!(
                "node {node} has `{}` at seq {} after dying at {t}",
                r.event, r.seq
            ));
        }
        if SLEEPLESS.contains(&r.event.as_str()) && !r.awake_before {
            problems.push(format!(
                "node {node} `{}` while asleep at seq {}",
                r.event, r.seq
            ));
        }
        *charged.entry(node).or_default() += r.charged_j;
        if let Some(res) = r.residual_j {
            if let Some(prev) = last_residual.insert(node, res) {
                if res > prev {
                    problems.push(format!("node {node} residual rose at seq {}", r.seq));
                }
            }
        }
        if r.detail_value("died") == Some("1") {
            dead_at.insert(node, r.time_us);
        }
    }
    let mut total_drawn = 0.0;
    let mut total_charged = 0.0;
    for n in &metrics.energy_by_node {
        let drawn = n.initial_j - n.residual_j;
        let c = charged.get(&n.node).copied().unwrap_or(0.0);
        total_drawn += drawn;
        total_charged += c;
        if (drawn - c).abs() > 1e-9 {
            problems.push(format!(
                "node {}: drawn {drawn:e} J, trace charged {c:e} J",
                n.node
            ));
        }
        let by_cat: f64 = n.consumed_j.values().sum();
        if (n.initial_j - n.residual_j - by_cat).abs() > 1e-12 * n.initial_j.max(1.0) {
            problems.push(format!("node {}: category totals do not balance", n.node));
        }
        if n.death_time_s.is_some() != dead_at.contains_key(&n.node) {
            problems.push(format!(
                "node {}: death in metrics and trace disagree",
                n.node
            ));
        }
    }
    if (total_drawn - total_charged).abs() > 1e-9 {
        problems.push(format!(
            "network drawn {total_drawn:e} J vs charged {total_charged:e} J"
        ));
    }
    if metrics.packets_delivered > metrics.packets_offered {
        problems.push("more delivered than offered".into());
    }
    for w in metrics.timeline.windows(2) {
        if w[0].node == w[1].node && w[1].residual_j > w[0].residual_j {
            problems.push(format!("timeline of node {} rises", w[0].node));
        }
    }
    let mut per_node: BTreeMap<NodeId, f64> = BTreeMap::new();
    for s in &metrics.timeline {
        if let Some(prev) = per_node.insert(s.node, s.residual_j) {
            if s.residual_j > prev + 1e-15 {
                problems.push(format!("timeline of node {} rises at {}", s.node, s.t_s));
            }
        }
    }
    problems
}

/// Aggregate power from a set of senders reaches `rx`: each sender in
/// range suffices; otherwise the normalised received powers must sum to 1.
fn oracle_reach(senders: &[Position], rx: Position, range: f64, crossover: f64) -> bool {
    let d: Vec<f64> = senders
        .iter()
        .map(|s| ((s.x - rx.x).powi(2) + (s.y - rx.y).powi(2)).sqrt())
        .collect();
    if d.iter().any(|&x| x <= range) {
        return true;
    }
    if d.len() < 2 {
        return false;
    }
    let far = d.iter().cloned().fold(0.0, f64::max);
    let alpha = if far >= crossover { 4.0 } else { 2.0 };
    d.iter().map(|x| (range / x).powf(alpha)).sum::<f64>() >= 1.0
}

/// Recounts collisions from the transmit records and every node's
/// recorded radio state, without going through the channel model.
pub fn replay_collisions(trace: &str, topo: &Topology, sub_slot: u64, crossover: f64) -> u64 {
    let recs = records(trace);
    #[derive(Clone, Copy)]
    struct Radio {
        awake: bool,
        since: u64,
        dead: bool,
    }
    let mut radio: BTreeMap<NodeId, Radio> = BTreeMap::new();
    let mut in_air: BTreeMap<u64, Vec<(NodeId, String)>> = BTreeMap::new();
    let mut collisions = 0;
    for r in &recs {
        if r.event == "channel_resolve" {
            let start = r.time_us - sub_slot;
            let txs = in_air.remove(&start).unwrap_or_default();
            let mut groups: BTreeMap<&str, Vec<Position>> = BTreeMap::new();
            for (s, rdv) in &txs {
                groups
                    .entry(rdv.as_str())
                    .or_default()
                    .push(topo.position(*s));
            }
            for n in &topo.nodes {
                if n.id == topo.station || txs.iter().any(|(s, _)| *s == n.id) {
                    continue;
                }
                let Some(st) = radio.get(&n.id) else { continue };
                if st.dead || !st.awake || st.since > start {
                    continue;
                }
                let audible = groups
                    .values()
                    .filter(|g| oracle_reach(g, n.position, topo.base_range, crossover))
                    .count();
                if audible >= 2 {
                    collisions += 1;
                }
            }
            continue;
        }
        let Some(node) = r.node else { continue };
        if r.event == "transmit" && r.detail_value("aborted").is_none() {
            let start: u64 = r.detail_value("start").unwrap().parse().unwrap();
            in_air
                .entry(start)
                .or_default()
                .push((node, r.detail_value("rdv").unwrap().to_string()));
        }
        let st = radio.entry(node).or_insert(Radio {
            awake: false,
            since: 0,
            dead: false,
        });
        if r.awake_after && !st.awake {
            st.since = r.time_us;
        }
        st.awake = r.awake_after;
        if r.detail_value("died") == Some("1") {
            st.dead = true;
        }
    }
    collisions
}
