//! Unit-disk radio reach, cooperative power-sum reach and per-sub-slot
//! collision resolution.

use std::collections::BTreeMap;

use crate::mac::{Packet, RdvId};
use crate::types::{Micros, NodeId, Position};

/// Single-transmitter reach: closed disk of radius `base_range`.
pub fn in_reach(sender: Position, receiver: Position, base_range: f64) -> bool {
    sender.distance(&receiver) <= base_range
}

/// Path-loss exponent for a cooperative group: `4` when the farthest
/// sender is at or beyond the crossover distance, `2` otherwise.
pub fn path_loss_exponent(farthest: f64, crossover: f64) -> i32 {
    if farthest >= crossover {
        4
    } else {
        2
    }
}

/// Whether `k = senders.len()` equal-power simultaneous senders close the
/// link to `receiver`: `sum_i (base_range / d_i)^alpha >= 1`.
///
/// Any sender already within `base_range` closes the link on its own, so
/// a single sender reduces exactly to [`in_reach`].
pub fn ct_reach(senders: &[Position], receiver: Position, base_range: f64, alpha: i32) -> bool {
    let distances: Vec<f64> = senders.iter().map(|s| s.distance(&receiver)).collect();
    if distances.iter().any(|&d| d <= base_range) {
        return true;
    }
    if distances.len() < 2 {
        return false;
    }
    let power: f64 = distances
        .iter()
        .map(|&d| (base_range / d).powi(alpha))
        .sum();
    power >= 1.0
}

/// [`ct_reach`] with the exponent picked from the farthest sender.
pub fn group_reach(
    senders: &[Position],
    receiver: Position,
    base_range: f64,
    crossover: f64,
) -> bool {
    if senders.is_empty() {
        return false;
    }
    let farthest = senders
        .iter()
        .map(|s| s.distance(&receiver))
        .fold(0.0, f64::max);
    ct_reach(
        senders,
        receiver,
        base_range,
        path_loss_exponent(farthest, crossover),
    )
}

/// One sender's transmission inside a sub-slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub rdv: RdvId,
    pub sender: NodeId,
    pub packet: Packet,
    pub addressees: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reception {
    /// Exactly one rendezvous was audible.
    Decoded {
        rdv: RdvId,
        packet: Packet,
        addressed: bool,
    },
    /// Two or more distinct rendezvous were audible; nothing decoded.
    Collision {
        audible: usize,
        addressed: bool,
        bits: u64,
    },
}

/// Outcome at every listener that heard anything. Listeners that heard
/// nothing are omitted.
///
/// All senders sharing a rendezvous count as one signal, so a cooperative
/// group never collides with itself.
pub fn resolve_slot<F>(
    transmissions: &[Transmission],
    listeners: &[NodeId],
    position: F,
    base_range: f64,
    crossover: f64,
) -> Vec<(NodeId, Reception)>
where
    F: Fn(NodeId) -> Position,
{
    let mut groups: BTreeMap<RdvId, Vec<&Transmission>> = BTreeMap::new();
    for tx in transmissions {
        groups.entry(tx.rdv).or_default().push(tx);
    }
    let group_positions: Vec<(RdvId, Vec<Position>, &Vec<&Transmission>)> = groups
        .iter()
        .map(|(rdv, txs)| (*rdv, txs.iter().map(|t| position(t.sender)).collect(), txs))
        .collect();

    let mut out = Vec::new();
    for &listener in listeners {
        if transmissions.iter().any(|t| t.sender == listener) {
            continue;
        }
        let here = position(listener);
        let audible: Vec<&(RdvId, Vec<Position>, &Vec<&Transmission>)> = group_positions
            .iter()
            .filter(|(_, senders, _)| group_reach(senders, here, base_range, crossover))
            .collect();
        let addressed_in =
            |txs: &Vec<&Transmission>| txs.iter().any(|t| t.addressees.contains(&listener));
        match audible.as_slice() {
            [] => {}
            [(rdv, _, txs)] => out.push((
                listener,
                Reception::Decoded {
                    rdv: *rdv,
                    packet: txs[0].packet.clone(),
                    addressed: addressed_in(txs),
                },
            )),
            many => {
                let addressed = many.iter().any(|(_, _, txs)| addressed_in(txs));
                let bits = many
                    .iter()
                    .flat_map(|(_, _, txs)| txs.iter().map(|t| t.packet.size_bits))
                    .max()
                    .unwrap_or(0);
                out.push((
                    listener,
                    Reception::Collision {
                        audible: many.len(),
                        addressed,
                        bits,
                    },
                ));
            }
        }
    }
    out
}

/// Transmissions in flight, keyed by sub-slot start.
#[derive(Debug, Default)]
pub struct Channel {
    active: BTreeMap<Micros, Vec<Transmission>>,
}

impl Channel {
    /// Adds a transmission; returns `true` when it opens a new sub-slot.
    pub fn submit(&mut self, start: Micros, tx: Transmission) -> bool {
        let entry = self.active.entry(start).or_default();
        let first = entry.is_empty();
        entry.push(tx);
        first
    }

    pub fn take(&mut self, start: Micros) -> Vec<Transmission> {
        self.active.remove(&start).unwrap_or_default()
    }

    pub fn is_transmitting(&self, start: Micros, node: NodeId) -> bool {
        self.active
            .get(&start)
            .is_some_and(|v| v.iter().any(|t| t.sender == node))
    }
}
