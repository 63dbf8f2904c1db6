//! Cooperative-helper selection performed by the energy-metering station.
//!
//! A transmitter asks the station for helpers. The station ranks the
//! requester's neighbours by metered residual energy, keeps those that can
//! afford one packet over the hop (`filter_candidates`), then elects the
//! ones whose energy covers the whole batch (`elect_helpers`). The elected
//! member with the most energy leads the group and acknowledges the
//! rendezvous.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::energy::{tx_energy, RadioEnergyParams};
use crate::error::SelectionError;
use crate::types::{NodeId, Position};

/// Bits per octet; requests carry the packet size in octets.
pub const BITS_PER_OCTET: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtRequest {
    pub requester: NodeId,
    /// Octets per packet.
    pub packet_size_bytes: u32,
    /// Packets the requester intends to send in this batch.
    pub packet_count: u32,
    /// Distance from the requester to its next hop (m).
    pub next_hop_distance: f64,
    pub neighbor_ids: Vec<NodeId>,
}

impl CtRequest {
    pub fn packet_bits(&self) -> u64 {
        u64::from(self.packet_size_bytes) * BITS_PER_OCTET
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub node: NodeId,
    /// Metered residual energy (J).
    pub energy: f64,
    /// Cost for this node to transmit one packet during the cooperative phase (J).
    pub per_packet_tx_energy: f64,
    pub distance_to_requester: f64,
}

/// Helpers elected for one cooperative rendezvous, by descending energy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ElectedList {
    pub helpers: Vec<NodeId>,
    /// `None` when nobody qualified.
    pub leader: Option<NodeId>,
}

impl ElectedList {
    pub fn is_empty(&self) -> bool {
        self.helpers.is_empty()
    }
}

/// Minimum residual energy a neighbour needs to be considered at all:
/// `e_elec * S + e_fs * S * D^2` with `S` in bits.
///
/// The amplifier term is always the `d^2` form, even beyond the crossover
/// distance; the actual transmissions are charged with the full model.
pub fn selection_threshold(request: &CtRequest, params: &RadioEnergyParams) -> f64 {
    let s = request.packet_bits() as f64;
    let d = request.next_hop_distance;
    params.e_elec * s + params.e_fs * s * d * d
}

fn check_sorted(records: &[CandidateRecord]) -> Result<(), SelectionError> {
    match records.windows(2).position(|w| w[0].energy < w[1].energy) {
        Some(i) => Err(SelectionError::Unsorted { position: i + 1 }),
        None => Ok(()),
    }
}

/// Keeps the neighbours whose energy meets [`selection_threshold`].
///
/// The input must already be sorted by descending energy; it is scanned in
/// full and its order is preserved.
pub fn filter_candidates(
    neighbors: &[CandidateRecord],
    request: &CtRequest,
    params: &RadioEnergyParams,
) -> Result<Vec<CandidateRecord>, SelectionError> {
    check_sorted(neighbors)?;
    let threshold = selection_threshold(request, params);
    Ok(neighbors
        .iter()
        .filter(|c| c.energy >= threshold)
        .copied()
        .collect())
}

/// Elects the candidates with `energy / (N * per_packet_tx_energy) >= 1`.
pub fn elect_helpers(
    candidates: &[CandidateRecord],
    packet_count: u32,
) -> Result<ElectedList, SelectionError> {
    if packet_count == 0 {
        return Err(SelectionError::ZeroPacketCount);
    }
    if let Some(bad) = candidates
        .iter()
        .find(|c| c.per_packet_tx_energy.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
    {
        return Err(SelectionError::InvalidCandidate(bad.node));
    }
    let n = f64::from(packet_count);
    let elected: Vec<CandidateRecord> = candidates
        .iter()
        .filter(|c| c.energy / (n * c.per_packet_tx_energy) >= 1.0)
        .copied()
        .collect();
    let leader = if elected.is_empty() {
        None
    } else {
        Some(leader_helper(&elected)?)
    };
    Ok(ElectedList {
        helpers: elected.iter().map(|c| c.node).collect(),
        leader,
    })
}

/// Highest-energy member; ties go to the smallest node id.
pub fn leader_helper(elected: &[CandidateRecord]) -> Result<NodeId, SelectionError> {
    elected
        .iter()
        .max_by(|a, b| a.energy.total_cmp(&b.energy).then(b.node.cmp(&a.node)))
        .map(|c| c.node)
        .ok_or(SelectionError::EmptyElection)
}

/// One metered node as seen by the station.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationReading {
    pub residual: f64,
    pub position: Position,
}

/// The station's view of every metered node.
#[derive(Debug, Clone, Default)]
pub struct EnergyRegistry {
    readings: BTreeMap<NodeId, StationReading>,
}

impl EnergyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, node: NodeId, reading: StationReading) {
        self.readings.insert(node, reading);
    }

    pub fn get(&self, node: NodeId) -> Option<&StationReading> {
        self.readings.get(&node)
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }
}

/// The station's answer to a [`CtRequest`].
#[derive(Debug, Clone, PartialEq)]
pub struct CtReply {
    pub elected: ElectedList,
    /// Ranked neighbour records that were evaluated.
    pub ranked: Vec<CandidateRecord>,
    /// Listed neighbours the station has no reading for.
    pub skipped: Vec<NodeId>,
    /// Mean metered residual over the known neighbours.
    pub mean_neighbor_residual: Option<f64>,
}

/// Builds the descending-energy candidate list for `request` from the registry.
pub fn rank_neighbors(
    request: &CtRequest,
    registry: &EnergyRegistry,
    params: &RadioEnergyParams,
) -> (Vec<CandidateRecord>, Vec<NodeId>) {
    let per_packet = tx_energy(request.packet_bits(), request.next_hop_distance, params);
    let origin = registry.get(request.requester).map(|r| r.position);
    let mut ranked = Vec::with_capacity(request.neighbor_ids.len());
    let mut skipped = Vec::new();
    for &id in &request.neighbor_ids {
        match registry.get(id) {
            Some(reading) => ranked.push(CandidateRecord {
                node: id,
                energy: reading.residual,
                per_packet_tx_energy: per_packet,
                distance_to_requester: origin
                    .map(|o| o.distance(&reading.position))
                    .unwrap_or(f64::INFINITY),
            }),
            None => skipped.push(id),
        }
    }
    ranked.sort_by(|a, b| b.energy.total_cmp(&a.energy).then(a.node.cmp(&b.node)));
    ranked.dedup_by_key(|c| c.node);
    (ranked, skipped)
}

/// Filter then elect against the current registry snapshot.
pub fn handle_ct_request(
    request: &CtRequest,
    registry: &EnergyRegistry,
    params: &RadioEnergyParams,
) -> Result<CtReply, SelectionError> {
    let (ranked, skipped) = rank_neighbors(request, registry, params);
    let candidates = filter_candidates(&ranked, request, params)?;
    let elected = elect_helpers(&candidates, request.packet_count)?;
    let mean_neighbor_residual = if ranked.is_empty() {
        None
    } else {
        Some(ranked.iter().map(|c| c.energy).sum::<f64>() / ranked.len() as f64)
    };
    Ok(CtReply {
        elected,
        ranked,
        skipped,
        mean_neighbor_residual,
    })
}
