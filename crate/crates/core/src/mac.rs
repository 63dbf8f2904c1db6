//! Per-node MAC state machine: duty-cycle schedules, reservations and cooperative transfers.
//!
//! Nodes sleep outside their duty-cycle window. A node with traffic wakes
//! at its next hop's window and either
//!
//! * asks the metering station for helpers, announces a superframe and,
//!   once the leader helper acknowledges, runs one cooperative rendezvous
//!   slot per packet (broadcast to helpers, then everyone sends the same
//!   packet to the next hop at once), or
//! * sends a reservation request straight to the next hop and, if it is
//!   accepted, transmits in the reserved interval.
//!
//! Every slot is split into four equal sub-slots; each transmission
//! occupies exactly one sub-slot.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::energy::{rx_energy, tx_energy, Activity, RadioEnergyParams};
use crate::engine::channel::group_reach;
use crate::error::ConfigError;
use crate::selection::{CtRequest, ElectedList};
use crate::types::{Micros, NodeId, Position};

pub const SUB_SLOTS_PER_SLOT: Micros = 4;

// ---------------------------------------------------------------------------
// Duty-cycle schedules
// ---------------------------------------------------------------------------

/// Periodic wake window `[wake_offset + k * frame_length, + active_window)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DutySchedule {
    pub frame_length: Micros,
    pub active_window: Micros,
    pub wake_offset: Micros,
}

impl DutySchedule {
    pub fn new(
        frame_length: Micros,
        active_window: Micros,
        wake_offset: Micros,
    ) -> Result<Self, ConfigError> {
        if active_window == 0 || active_window > frame_length {
            return Err(ConfigError::invalid(
                "mac.active_window_s",
                "must be in (0, frame_length]",
            ));
        }
        if wake_offset >= frame_length {
            return Err(ConfigError::invalid(
                "mac",
                "wake offset must be below the frame length",
            ));
        }
        Ok(Self {
            frame_length,
            active_window,
            wake_offset,
        })
    }

    /// Start of the first window beginning at or after `t`.
    pub fn next_window_start(&self, t: Micros) -> Micros {
        if t <= self.wake_offset {
            return self.wake_offset;
        }
        let k = (t - self.wake_offset).div_ceil(self.frame_length);
        self.wake_offset + k * self.frame_length
    }

    pub fn is_awake(&self, t: Micros) -> bool {
        t >= self.wake_offset && (t - self.wake_offset) % self.frame_length < self.active_window
    }
}

/// Links and hop depths used to lay out wake windows.
#[derive(Debug, Clone, Default)]
pub struct HopGraph {
    depth: BTreeMap<NodeId, u32>,
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl HopGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: NodeId, depth: u32) {
        self.depth.insert(node, depth);
        self.adjacency.entry(node).or_default();
    }

    pub fn add_link(&mut self, a: NodeId, b: NodeId) {
        if a != b {
            self.adjacency.entry(a).or_default().insert(b);
            self.adjacency.entry(b).or_default().insert(a);
        }
    }

    /// Nodes within two hops of `node`, excluding it.
    pub fn two_hop(&self, node: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        if let Some(first) = self.adjacency.get(&node) {
            for &n in first {
                out.insert(n);
                if let Some(second) = self.adjacency.get(&n) {
                    out.extend(second.iter().copied());
                }
            }
        }
        out.remove(&node);
        out
    }
}

/// Pipelined and orthogonal wake offsets.
///
/// A node at depth `d` prefers window index `max_depth - d`, so a packet
/// can advance one hop per active window towards the sink. Nodes are
/// placed in `(depth, id)` order; when the preferred index is already held
/// by a node within two hops the next free index is taken instead.
pub fn build_schedules(
    graph: &HopGraph,
    frame_length: Micros,
    active_window: Micros,
) -> Result<BTreeMap<NodeId, DutySchedule>, ConfigError> {
    if active_window == 0 || active_window > frame_length {
        return Err(ConfigError::invalid(
            "mac.active_window_s",
            "must be in (0, frame_length]",
        ));
    }
    let windows = frame_length / active_window;
    let max_depth = graph.depth.values().copied().max().unwrap_or(0);
    let mut order: Vec<(u32, NodeId)> = graph.depth.iter().map(|(n, d)| (*d, *n)).collect();
    order.sort();

    let mut index: BTreeMap<NodeId, Micros> = BTreeMap::new();
    for (depth, node) in order {
        let neighborhood = graph.two_hop(node);
        let taken: HashSet<Micros> = neighborhood
            .iter()
            .filter_map(|n| index.get(n).copied())
            .collect();
        let preferred = Micros::from(max_depth - depth) % windows;
        let slot = (0..windows)
            .map(|k| (preferred + k) % windows)
            .find(|w| !taken.contains(w))
            .ok_or_else(|| {
                let members: Vec<String> = std::iter::once(node)
                    .chain(neighborhood.iter().copied())
                    .map(|n| n.to_string())
                    .collect();
                ConfigError::invalid(
                    "mac.frame_length_s",
                    format!(
                        "frame holds {windows} active windows but the two-hop neighbourhood of node {node} \
                         [{}] needs {}",
                        members.join(" "),
                        members.len()
                    ),
                )
            })?;
        index.insert(node, slot);
    }
    index
        .into_iter()
        .map(|(n, w)| {
            Ok((
                n,
                DutySchedule::new(frame_length, active_window, w * active_window)?,
            ))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Packets and rendezvous
// ---------------------------------------------------------------------------

/// Identifies one exchange: all senders of a cooperative rendezvous share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RdvId {
    pub owner: NodeId,
    pub n: u32,
}

impl fmt::Display for RdvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.owner, self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PacketKind {
    Data,
    CtRequest,
    CandidateReply,
    Superframe(Box<Superframe>),
    CtAck {
        rdv: RdvId,
    },
    NoctRequest {
        rdv: RdvId,
        start: Micros,
        duration: Micros,
    },
    NoctReply {
        rdv: RdvId,
        accepted: bool,
    },
    DataAck {
        origin: NodeId,
        seq: u64,
    },
}

impl PacketKind {
    pub fn tag(&self) -> &'static str {
        match self {
            PacketKind::Data => "data",
            PacketKind::CtRequest => "ct_request",
            PacketKind::CandidateReply => "candidate_reply",
            PacketKind::Superframe(_) => "superframe",
            PacketKind::CtAck { .. } => "ct_ack",
            PacketKind::NoctRequest { .. } => "noct_request",
            PacketKind::NoctReply { .. } => "noct_reply",
            PacketKind::DataAck { .. } => "data_ack",
        }
    }
}

/// `source`/`destination` are end-to-end for data and per-hop for control.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub seq: u64,
    pub size_bits: u64,
    pub source: NodeId,
    pub destination: NodeId,
    pub kind: PacketKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Control,
    Free,
    CtRdv,
    NoctRdv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub kind: SlotKind,
    pub start: Micros,
    pub duration: Micros,
    pub participants: Vec<NodeId>,
}

impl Slot {
    pub fn end(&self) -> Micros {
        self.start + self.duration
    }
}

/// Announcement partitioning the coming frame into a control slot, one
/// cooperative rendezvous slot per packet, and free time.
#[derive(Debug, Clone, PartialEq)]
pub struct Superframe {
    pub rdv: RdvId,
    pub transmitter: NodeId,
    pub next_hop: NodeId,
    pub helpers: Vec<NodeId>,
    pub leader: Option<NodeId>,
    pub origin_time: Micros,
    pub slots: Vec<Slot>,
    /// The rendezvous slots run past the end of the first frame.
    pub continuation: bool,
}

impl Superframe {
    pub fn ct_slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter().filter(|s| s.kind == SlotKind::CtRdv)
    }

    /// End of the last non-free slot.
    pub fn reserved_end(&self) -> Micros {
        self.slots
            .iter()
            .filter(|s| s.kind != SlotKind::Free)
            .map(Slot::end)
            .max()
            .unwrap_or(self.origin_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotParams {
    pub slot: Micros,
    pub frame: Micros,
}

/// Lays out a leading control slot, `packet_count` rendezvous slots and
/// free time to the end of the frame starting at `now`.
pub fn compose_superframe(
    rdv: RdvId,
    transmitter: NodeId,
    elected: &ElectedList,
    next_hop: NodeId,
    packet_count: u32,
    now: Micros,
    params: SlotParams,
) -> Superframe {
    let frame_end = now + params.frame;
    let mut participants = vec![transmitter];
    participants.extend(elected.helpers.iter().copied());
    participants.push(next_hop);

    let mut slots = Vec::new();
    let mut cursor = now;
    if packet_count > 0 {
        slots.push(Slot {
            kind: SlotKind::Control,
            start: cursor,
            duration: params.slot,
            participants: participants.clone(),
        });
        cursor += params.slot;
        for _ in 0..packet_count {
            slots.push(Slot {
                kind: SlotKind::CtRdv,
                start: cursor,
                duration: params.slot,
                participants: participants.clone(),
            });
            cursor += params.slot;
        }
    }
    if cursor < frame_end {
        slots.push(Slot {
            kind: SlotKind::Free,
            start: cursor,
            duration: frame_end - cursor,
            participants: vec![],
        });
    }
    Superframe {
        rdv,
        transmitter,
        next_hop,
        helpers: elected.helpers.clone(),
        leader: elected.leader,
        origin_time: now,
        slots,
        continuation: cursor > frame_end,
    }
}

// ---------------------------------------------------------------------------
// Reservations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservationRole {
    Sender,
    Receiver,
    Helper,
}

/// `[start, end)` during which the node is committed to one exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reservation {
    pub rdv: RdvId,
    pub start: Micros,
    pub end: Micros,
    pub role: ReservationRole,
    /// Node the packets go to next (the next hop of the exchange).
    pub forward_to: NodeId,
}

impl Reservation {
    pub fn overlaps(&self, start: Micros, end: Micros) -> bool {
        self.start < end && start < self.end
    }

    pub fn covers(&self, t: Micros) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReservationDecision {
    Accept,
    Reject,
}

/// No-CT reservation between two nodes that are both awake.
///
/// The receiver accepts iff it holds no reservation overlapping the
/// interval; on accept both sides record it.
pub fn reserve_noct(
    sender: &mut MacState,
    next_hop: &mut MacState,
    rdv: RdvId,
    interval: (Micros, Micros),
) -> ReservationDecision {
    let (start, duration) = interval;
    let decision = next_hop.try_reserve(Reservation {
        rdv,
        start,
        end: start + duration,
        role: ReservationRole::Receiver,
        forward_to: next_hop.node,
    });
    if decision == ReservationDecision::Accept {
        sender.reservations.retain(|r| r.rdv != rdv);
        sender.reservations.push(Reservation {
            rdv,
            start,
            end: start + duration,
            role: ReservationRole::Sender,
            forward_to: next_hop.node,
        });
    }
    decision
}

// ---------------------------------------------------------------------------
// Mode selection and the cooperative transfer cost model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSetting {
    Ct,
    Noct,
    Auto,
}

impl fmt::Display for ModeSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModeSetting::Ct => "ct",
            ModeSetting::Noct => "noct",
            ModeSetting::Auto => "auto",
        })
    }
}

impl std::str::FromStr for ModeSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ct" => Ok(ModeSetting::Ct),
            "noct" => Ok(ModeSetting::Noct),
            "auto" => Ok(ModeSetting::Auto),
            other => Err(format!(
                "unknown mode `{other}` (expected ct, noct or auto)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxMode {
    Ct,
    Noct,
}

/// Chooses cooperative or direct transmission for one batch.
///
/// Cooperation needs at least one elected helper. Under `Auto` it is also
/// only used when the next hop is out of direct reach or the sender holds
/// less than `residual_fraction` of its neighbours' mean residual energy.
pub fn select_mode(
    setting: ModeSetting,
    has_helpers: bool,
    next_hop_in_reach: bool,
    own_residual: f64,
    mean_neighbor_residual: Option<f64>,
    residual_fraction: f64,
) -> TxMode {
    match setting {
        ModeSetting::Noct => TxMode::Noct,
        ModeSetting::Ct if has_helpers => TxMode::Ct,
        ModeSetting::Ct => TxMode::Noct,
        ModeSetting::Auto => {
            let depleted =
                mean_neighbor_residual.is_some_and(|m| own_residual < residual_fraction * m);
            if has_helpers && (!next_hop_in_reach || depleted) {
                TxMode::Ct
            } else {
                TxMode::Noct
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtParticipant {
    pub id: NodeId,
    pub position: Position,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtTransferOutcome {
    pub delivered: bool,
    /// Nodes that sent in the cooperative phase.
    pub cooperative_senders: Vec<NodeId>,
    pub charges: Vec<(NodeId, Activity, f64)>,
}

impl CtTransferOutcome {
    pub fn charged(&self, node: NodeId, activity: Activity) -> f64 {
        self.charges
            .iter()
            .filter(|(n, a, _)| *n == node && *a == activity)
            .map(|(_, _, e)| e)
            .sum()
    }
}

/// Energy and delivery of one cooperative slot in isolation.
///
/// Broadcast phase: the transmitter sends the packet to the live helpers
/// over the farthest helper distance and each helper pays reception.
/// Cooperative phase: the transmitter and every live helper send it to the
/// next hop at once, each paying for its own distance. With no live
/// helpers this is a plain direct transmission. The next hop answers with
/// a `ack_bits` acknowledgement, received only when the transmitter is in
/// direct reach.
pub fn ct_transfer(
    transmitter: CtParticipant,
    helpers: &[CtParticipant],
    next_hop: CtParticipant,
    packet_bits: u64,
    ack_bits: u64,
    params: &RadioEnergyParams,
    base_range: f64,
) -> CtTransferOutcome {
    let mut charges = Vec::new();
    let live: Vec<&CtParticipant> = helpers.iter().filter(|h| h.alive).collect();

    if transmitter.alive && !live.is_empty() {
        let spread = live
            .iter()
            .map(|h| h.position.distance(&transmitter.position))
            .fold(0.0, f64::max);
        charges.push((
            transmitter.id,
            Activity::Transmit,
            tx_energy(packet_bits, spread, params),
        ));
        for h in &live {
            charges.push((h.id, Activity::Receive, rx_energy(packet_bits, params)));
        }
    }

    let mut senders: Vec<&CtParticipant> = Vec::new();
    if transmitter.alive {
        senders.push(&transmitter);
    }
    senders.extend(live.iter().copied());
    for s in &senders {
        let d = s.position.distance(&next_hop.position);
        charges.push((s.id, Activity::Transmit, tx_energy(packet_bits, d, params)));
    }
    let positions: Vec<Position> = senders.iter().map(|s| s.position).collect();
    let crossover = crate::energy::crossover_distance(params);
    let delivered =
        next_hop.alive && group_reach(&positions, next_hop.position, base_range, crossover);
    if delivered {
        charges.push((
            next_hop.id,
            Activity::Receive,
            rx_energy(packet_bits, params),
        ));
        let back = next_hop.position.distance(&transmitter.position);
        charges.push((
            next_hop.id,
            Activity::Transmit,
            tx_energy(ack_bits, back, params),
        ));
        if transmitter.alive && back <= base_range {
            charges.push((
                transmitter.id,
                Activity::Receive,
                rx_energy(ack_bits, params),
            ));
        }
    }
    CtTransferOutcome {
        delivered,
        cooperative_senders: senders.iter().map(|s| s.id).collect(),
        charges,
    }
}

// ---------------------------------------------------------------------------
// Node state machine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Sleeping,
    IdleListening,
    AwaitingCandidates,
    AwaitingCtAck,
    AwaitingNoCtReply,
    CtBroadcast,
    CtCooperative,
    Receiving,
    Transmitting,
}

/// Run-wide MAC parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MacConfig {
    pub frame: Micros,
    pub active: Micros,
    pub slot: Micros,
    pub timeout: Micros,
    pub retry_cap: u32,
    pub mode: ModeSetting,
    pub auto_residual_fraction: f64,
    pub control_bits: u64,
    pub superframe_bits: u64,
    pub data_bytes: u32,
}

impl MacConfig {
    pub fn sub_slot(&self) -> Micros {
        self.slot / SUB_SLOTS_PER_SLOT
    }

    pub fn slot_params(&self) -> SlotParams {
        SlotParams {
            slot: self.slot,
            frame: self.frame,
        }
    }
}

/// Static per-node facts the state machine needs.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeContext {
    pub id: NodeId,
    pub next_hop: Option<NodeId>,
    pub next_hop_schedule: Option<DutySchedule>,
    pub next_hop_distance: f64,
    pub next_hop_in_reach: bool,
    /// Neighbours the station may recruit as helpers.
    pub helper_candidates: Vec<NodeId>,
    pub is_sink: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimerTag {
    TxOpportunity,
    CtAckTimeout(RdvId),
    NoctReplyTimeout(RdvId),
    CtSlot(RdvId, u32),
    CtCooperative(RdvId, u32),
    NoctSlot(RdvId, u32),
    SessionEnd(RdvId),
    ReservationStart(RdvId),
    ReservationEnd(RdvId),
    StayAwakeExpired,
}

impl fmt::Display for TimerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimerTag::TxOpportunity => write!(f, "tx_opportunity"),
            TimerTag::CtAckTimeout(r) => write!(f, "ct_ack_timeout@{r}"),
            TimerTag::NoctReplyTimeout(r) => write!(f, "noct_reply_timeout@{r}"),
            TimerTag::CtSlot(r, k) => write!(f, "ct_slot@{r}#{k}"),
            TimerTag::CtCooperative(r, k) => write!(f, "ct_cooperative@{r}#{k}"),
            TimerTag::NoctSlot(r, k) => write!(f, "noct_slot@{r}#{k}"),
            TimerTag::SessionEnd(r) => write!(f, "session_end@{r}"),
            TimerTag::ReservationStart(r) => write!(f, "reservation_start@{r}"),
            TimerTag::ReservationEnd(r) => write!(f, "reservation_end@{r}"),
            TimerTag::StayAwakeExpired => write!(f, "stay_awake_expired"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MacEvent {
    WindowOpen,
    WindowClose,
    Timer(TimerTag),
    /// A locally generated data packet.
    Arrival(Packet),
    StationReply {
        elected: ElectedList,
        mean_neighbor_residual: Option<f64>,
        own_residual: f64,
    },
    /// Out-of-band wake-up relayed by the station for a rendezvous.
    WakeNotice {
        rdv: RdvId,
        until: Micros,
        as_receiver: bool,
        forward_to: NodeId,
    },
    Received {
        rdv: RdvId,
        packet: Packet,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum MacOutput {
    Transmit {
        at: Micros,
        rdv: RdvId,
        packet: Packet,
        to: Vec<NodeId>,
    },
    Timer {
        at: Micros,
        tag: TimerTag,
    },
    StationRequest(CtRequest),
    /// Ask the station to wake these nodes until `until`.
    WakeParticipants {
        rdv: RdvId,
        receiver: NodeId,
        helpers: Vec<NodeId>,
        helpers_until: Micros,
        until: Micros,
    },
    Delivered(Packet),
    Dropped(Packet),
    /// The event had no effect in the current state.
    Noop(&'static str),
    SessionStarted {
        rdv: RdvId,
        mode: TxMode,
        packets: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    packet: Packet,
    attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    AwaitingCandidates,
    AwaitingCtAck,
    AwaitingNoCtReply,
    CtTransfer,
    NoctTransfer,
}

#[derive(Debug, Clone, PartialEq)]
struct Session {
    rdv: RdvId,
    stage: Stage,
    batch: usize,
    superframe: Option<Superframe>,
    /// Start of the reserved data interval (no-CT).
    data_start: Micros,
    acked: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacState {
    pub node: NodeId,
    pub phase: Phase,
    pub reservations: Vec<Reservation>,
    pending: VecDeque<Pending>,
    session: Option<Session>,
    opportunity_at: Option<Micros>,
    backoff: Micros,
    own_window: bool,
    stay_awake_until: Micros,
    next_rdv: u32,
    seen: HashSet<(NodeId, u64)>,
    last_time: Micros,
}

impl MacState {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            phase: Phase::Sleeping,
            reservations: Vec::new(),
            pending: VecDeque::new(),
            session: None,
            opportunity_at: None,
            backoff: 0,
            own_window: false,
            stay_awake_until: 0,
            next_rdv: 0,
            seen: HashSet::new(),
            last_time: 0,
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn has_session(&self) -> bool {
        self.session.is_some()
    }

    /// Radio on?
    pub fn is_awake(&self) -> bool {
        self.phase != Phase::Sleeping
    }

    /// Packets still queued here, for accounting when the node dies.
    pub fn take_pending(&mut self) -> Vec<Packet> {
        self.pending.drain(..).map(|p| p.packet).collect()
    }

    /// Records `r` unless it overlaps an existing reservation.
    pub fn try_reserve(&mut self, r: Reservation) -> ReservationDecision {
        if self
            .reservations
            .iter()
            .any(|x| x.rdv != r.rdv && x.overlaps(r.start, r.end))
        {
            return ReservationDecision::Reject;
        }
        self.reservations.retain(|x| x.rdv != r.rdv);
        self.reservations.push(r);
        ReservationDecision::Accept
    }

    fn reservation(&self, rdv: RdvId) -> Option<&Reservation> {
        self.reservations.iter().find(|r| r.rdv == rdv)
    }

    fn fresh_rdv(&mut self) -> RdvId {
        let rdv = RdvId {
            owner: self.node,
            n: self.next_rdv,
        };
        self.next_rdv += 1;
        rdv
    }

    fn wants_radio(&self, now: Micros) -> bool {
        self.own_window
            || self.session.is_some()
            || self.stay_awake_until > now
            || self.reservations.iter().any(|r| r.covers(now))
    }

    fn resting_phase(&self, now: Micros) -> Phase {
        match self.session.as_ref().map(|s| s.stage) {
            Some(Stage::AwaitingCandidates) => Phase::AwaitingCandidates,
            Some(Stage::AwaitingCtAck) => Phase::AwaitingCtAck,
            Some(Stage::AwaitingNoCtReply) => Phase::AwaitingNoCtReply,
            _ if self.wants_radio(now) => Phase::IdleListening,
            _ => Phase::Sleeping,
        }
    }

    /// Advances the state machine by one event.
    ///
    /// Total over every (phase, event) pair; combinations with no effect
    /// yield a single [`MacOutput::Noop`].
    pub fn step(
        &mut self,
        ctx: &NodeContext,
        cfg: &MacConfig,
        now: Micros,
        event: MacEvent,
    ) -> Vec<MacOutput> {
        debug_assert!(
            now >= self.last_time,
            "event at {now} before {}",
            self.last_time
        );
        self.last_time = self.last_time.max(now);
        let mut out = Vec::new();
        let mut active_phase = None;
        match event {
            MacEvent::WindowOpen => self.own_window = true,
            MacEvent::WindowClose => self.own_window = false,
            MacEvent::Arrival(packet) => {
                self.pending.push_back(Pending {
                    packet,
                    attempts: 0,
                });
                self.ensure_opportunity(ctx, now, &mut out);
            }
            MacEvent::Timer(tag) => active_phase = self.on_timer(ctx, cfg, now, tag, &mut out),
            MacEvent::StationReply {
                elected,
                mean_neighbor_residual,
                own_residual,
            } => self.on_station_reply(
                ctx,
                cfg,
                now,
                elected,
                mean_neighbor_residual,
                own_residual,
                &mut out,
            ),
            MacEvent::WakeNotice {
                rdv,
                until,
                as_receiver,
                forward_to,
            } => {
                self.stay_awake_until = self.stay_awake_until.max(until);
                out.push(MacOutput::Timer {
                    at: until,
                    tag: TimerTag::StayAwakeExpired,
                });
                if as_receiver {
                    let r = Reservation {
                        rdv,
                        start: now,
                        end: until,
                        role: ReservationRole::Receiver,
                        forward_to,
                    };
                    if self.try_reserve(r) == ReservationDecision::Accept {
                        out.push(MacOutput::Timer {
                            at: until,
                            tag: TimerTag::ReservationEnd(rdv),
                        });
                    }
                }
            }
            MacEvent::Received { rdv, packet } => {
                active_phase = self.on_received(ctx, cfg, now, rdv, packet, &mut out)
            }
        }
        self.phase = active_phase.unwrap_or_else(|| self.resting_phase(now));
        out
    }

    fn ensure_opportunity(&mut self, ctx: &NodeContext, now: Micros, out: &mut Vec<MacOutput>) {
        if self.session.is_some() || self.opportunity_at.is_some() || self.pending.is_empty() {
            return;
        }
        let Some(schedule) = ctx.next_hop_schedule else {
            return;
        };
        let at = schedule.next_window_start(now) + self.backoff;
        self.opportunity_at = Some(at);
        out.push(MacOutput::Timer {
            at,
            tag: TimerTag::TxOpportunity,
        });
    }

    fn on_timer(
        &mut self,
        ctx: &NodeContext,
        cfg: &MacConfig,
        now: Micros,
        tag: TimerTag,
        out: &mut Vec<MacOutput>,
    ) -> Option<Phase> {
        let session_rdv = self.session.as_ref().map(|s| s.rdv);
        let stage = self.session.as_ref().map(|s| s.stage);
        match tag {
            TimerTag::TxOpportunity => {
                self.opportunity_at = None;
                self.start_session(ctx, cfg, now, out);
            }
            TimerTag::CtAckTimeout(rdv)
                if session_rdv == Some(rdv) && stage == Some(Stage::AwaitingCtAck) =>
            {
                return Some(self.start_noct(ctx, cfg, now, out));
            }
            TimerTag::NoctReplyTimeout(rdv)
                if session_rdv == Some(rdv) && stage == Some(Stage::AwaitingNoCtReply) =>
            {
                self.fail_session(ctx, cfg, now, out);
            }
            TimerTag::CtSlot(rdv, k)
                if session_rdv == Some(rdv) && stage == Some(Stage::CtTransfer) =>
            {
                let session = self.session.as_ref().expect("session checked");
                let sf = session
                    .superframe
                    .as_ref()
                    .expect("ct session has a superframe");
                let packet = self.pending[k as usize].packet.clone();
                if sf.helpers.is_empty() {
                    out.push(MacOutput::Transmit {
                        at: now,
                        rdv,
                        packet,
                        to: vec![sf.next_hop],
                    });
                    return Some(Phase::CtCooperative);
                }
                out.push(MacOutput::Transmit {
                    at: now,
                    rdv,
                    packet,
                    to: sf.helpers.clone(),
                });
                out.push(MacOutput::Timer {
                    at: now + cfg.sub_slot(),
                    tag: TimerTag::CtCooperative(rdv, k),
                });
                return Some(Phase::CtBroadcast);
            }
            TimerTag::CtCooperative(rdv, k)
                if session_rdv == Some(rdv) && stage == Some(Stage::CtTransfer) =>
            {
                let sf = self
                    .session
                    .as_ref()
                    .and_then(|s| s.superframe.as_ref())
                    .expect("ct session");
                let packet = self.pending[k as usize].packet.clone();
                out.push(MacOutput::Transmit {
                    at: now,
                    rdv,
                    packet,
                    to: vec![sf.next_hop],
                });
                return Some(Phase::CtCooperative);
            }
            TimerTag::NoctSlot(rdv, k)
                if session_rdv == Some(rdv) && stage == Some(Stage::NoctTransfer) =>
            {
                let packet = self.pending[k as usize].packet.clone();
                let to = ctx.next_hop.expect("sender has a next hop");
                out.push(MacOutput::Transmit {
                    at: now,
                    rdv,
                    packet,
                    to: vec![to],
                });
                return Some(Phase::Transmitting);
            }
            TimerTag::SessionEnd(rdv) if session_rdv == Some(rdv) => {
                self.finish_session(ctx, cfg, now, out)
            }
            TimerTag::ReservationEnd(rdv) => {
                let before = self.reservations.len();
                self.reservations
                    .retain(|r| !(r.rdv == rdv && r.end <= now));
                if before == self.reservations.len() {
                    out.push(MacOutput::Noop("reservation already released"));
                }
            }
            TimerTag::ReservationStart(_) | TimerTag::StayAwakeExpired => {}
            _ => out.push(MacOutput::Noop("stale timer")),
        }
        None
    }

    fn start_session(
        &mut self,
        ctx: &NodeContext,
        cfg: &MacConfig,
        now: Micros,
        out: &mut Vec<MacOutput>,
    ) {
        let Some(next_hop) = ctx.next_hop else {
            out.push(MacOutput::Noop("no route"));
            return;
        };
        if self.session.is_some() || self.pending.is_empty() {
            out.push(MacOutput::Noop("nothing to send"));
            return;
        }
        let batch = self.pending.len();
        let end = now + cfg.slot * (1 + batch as Micros);
        if self.reservations.iter().any(|r| r.overlaps(now, end)) {
            // busy as a helper or receiver; try the following window
            self.ensure_opportunity(ctx, now + 1, out);
            return;
        }
        let rdv = self.fresh_rdv();
        self.reservations.push(Reservation {
            rdv,
            start: now,
            end,
            role: ReservationRole::Sender,
            forward_to: next_hop,
        });
        self.session = Some(Session {
            rdv,
            stage: Stage::AwaitingCandidates,
            batch,
            superframe: None,
            data_start: 0,
            acked: vec![false; batch],
        });
        if cfg.mode == ModeSetting::Noct {
            self.start_noct(ctx, cfg, now, out);
            return;
        }
        out.push(MacOutput::StationRequest(CtRequest {
            requester: self.node,
            packet_size_bytes: cfg.data_bytes,
            packet_count: batch as u32,
            next_hop_distance: ctx.next_hop_distance,
            neighbor_ids: ctx.helper_candidates.clone(),
        }));
    }

    #[allow(clippy::too_many_arguments)]
    fn on_station_reply(
        &mut self,
        ctx: &NodeContext,
        cfg: &MacConfig,
        now: Micros,
        elected: ElectedList,
        mean_neighbor_residual: Option<f64>,
        own_residual: f64,
        out: &mut Vec<MacOutput>,
    ) {
        let Some(session) = self
            .session
            .as_ref()
            .filter(|s| s.stage == Stage::AwaitingCandidates)
        else {
            out.push(MacOutput::Noop("unsolicited station reply"));
            return;
        };
        let rdv = session.rdv;
        let batch = session.batch;
        let next_hop = ctx.next_hop.expect("session implies a route");
        let mode = select_mode(
            cfg.mode,
            !elected.is_empty(),
            ctx.next_hop_in_reach,
            own_residual,
            mean_neighbor_residual,
            cfg.auto_residual_fraction,
        );
        if mode == TxMode::Noct {
            self.start_noct(ctx, cfg, now, out);
            return;
        }
        let sf = compose_superframe(
            rdv,
            self.node,
            &elected,
            next_hop,
            batch as u32,
            now,
            cfg.slot_params(),
        );
        let until = sf.reserved_end();
        out.push(MacOutput::SessionStarted {
            rdv,
            mode: TxMode::Ct,
            packets: batch as u32,
        });
        out.push(MacOutput::WakeParticipants {
            rdv,
            receiver: next_hop,
            helpers: sf.helpers.clone(),
            helpers_until: now + cfg.slot,
            until,
        });
        let packet = Packet {
            seq: u64::from(rdv.n),
            size_bits: cfg.superframe_bits,
            source: self.node,
            destination: next_hop,
            kind: PacketKind::Superframe(Box::new(sf.clone())),
        };
        let mut to = sf.helpers.clone();
        to.push(next_hop);
        out.push(MacOutput::Transmit {
            at: now,
            rdv,
            packet,
            to,
        });
        out.push(MacOutput::Timer {
            at: now + cfg.timeout,
            tag: TimerTag::CtAckTimeout(rdv),
        });
        self.set_sender_window(rdv, now, until);
        let session = self.session.as_mut().expect("checked above");
        session.stage = Stage::AwaitingCtAck;
        session.superframe = Some(sf);
    }

    fn set_sender_window(&mut self, rdv: RdvId, start: Micros, end: Micros) {
        if let Some(r) = self.reservations.iter_mut().find(|r| r.rdv == rdv) {
            r.start = start;
            r.end = end;
        }
    }

    /// Sends a reservation request to the next hop for the batch.
    fn start_noct(
        &mut self,
        ctx: &NodeContext,
        cfg: &MacConfig,
        now: Micros,
        out: &mut Vec<MacOutput>,
    ) -> Phase {
        let next_hop = ctx.next_hop.expect("session implies a route");
        let session = self.session.as_mut().expect("noct start needs a session");
        let rdv = session.rdv;
        let batch = session.batch as Micros;
        session.stage = Stage::AwaitingNoCtReply;
        session.superframe = None;
        session.data_start = now + cfg.slot;
        let start = session.data_start;
        let duration = batch * cfg.slot;
        out.push(MacOutput::SessionStarted {
            rdv,
            mode: TxMode::Noct,
            packets: batch as u32,
        });
        out.push(MacOutput::Transmit {
            at: now,
            rdv,
            packet: Packet {
                seq: u64::from(rdv.n),
                size_bits: cfg.control_bits,
                source: self.node,
                destination: next_hop,
                kind: PacketKind::NoctRequest {
                    rdv,
                    start,
                    duration,
                },
            },
            to: vec![next_hop],
        });
        out.push(MacOutput::Timer {
            at: now + cfg.timeout,
            tag: TimerTag::NoctReplyTimeout(rdv),
        });
        self.set_sender_window(rdv, now, start + duration);
        Phase::AwaitingNoCtReply
    }

    fn release_session(&mut self) -> Option<Session> {
        let session = self.session.take()?;
        self.reservations.retain(|r| r.rdv != session.rdv);
        Some(session)
    }

    /// Bumps attempts on the first `count` pending packets, dropping those
    /// past the retry cap.
    fn charge_attempts(&mut self, indices: &[usize], cfg: &MacConfig, out: &mut Vec<MacOutput>) {
        for &i in indices.iter().rev() {
            self.pending[i].attempts += 1;
            if self.pending[i].attempts > cfg.retry_cap {
                let dropped = self.pending.remove(i).expect("index in range");
                out.push(MacOutput::Dropped(dropped.packet));
            }
        }
    }

    fn retry_backoff(&self, cfg: &MacConfig) -> Micros {
        let slots_per_window = (cfg.active / cfg.slot).max(1);
        Micros::from(self.node.0) % slots_per_window * cfg.slot
    }

    fn fail_session(
        &mut self,
        ctx: &NodeContext,
        cfg: &MacConfig,
        now: Micros,
        out: &mut Vec<MacOutput>,
    ) {
        let Some(session) = self.release_session() else {
            return;
        };
        let indices: Vec<usize> = (0..session.batch).collect();
        self.charge_attempts(&indices, cfg, out);
        self.backoff = self.retry_backoff(cfg);
        self.ensure_opportunity(ctx, now + 1, out);
    }

    fn finish_session(
        &mut self,
        ctx: &NodeContext,
        cfg: &MacConfig,
        now: Micros,
        out: &mut Vec<MacOutput>,
    ) {
        let Some(session) = self.release_session() else {
            return;
        };
        match session.stage {
            Stage::CtTransfer => {
                // no feedback path is guaranteed; the batch leaves the queue
                for _ in 0..session.batch {
                    self.pending.pop_front();
                }
                self.backoff = 0;
            }
            _ => {
                let unacked: Vec<usize> =
                    (0..session.batch).filter(|&i| !session.acked[i]).collect();
                for i in (0..session.batch).rev() {
                    if session.acked[i] {
                        self.pending.remove(i);
                    }
                }
                let remaining: Vec<usize> = (0..unacked.len()).collect();
                self.charge_attempts(&remaining, cfg, out);
                self.backoff = if unacked.is_empty() {
                    0
                } else {
                    self.retry_backoff(cfg)
                };
            }
        }
        self.ensure_opportunity(ctx, now, out);
    }

    fn accept_data(
        &mut self,
        ctx: &NodeContext,
        now: Micros,
        packet: &Packet,
        out: &mut Vec<MacOutput>,
    ) {
        if !self.seen.insert((packet.source, packet.seq)) {
            return;
        }
        if ctx.is_sink {
            out.push(MacOutput::Delivered(packet.clone()));
        } else {
            self.pending.push_back(Pending {
                packet: packet.clone(),
                attempts: 0,
            });
            self.ensure_opportunity(ctx, now, out);
        }
    }

    fn ack_for(&self, cfg: &MacConfig, packet: &Packet, to: NodeId) -> Packet {
        Packet {
            seq: packet.seq,
            size_bits: cfg.control_bits,
            source: self.node,
            destination: to,
            kind: PacketKind::DataAck {
                origin: packet.source,
                seq: packet.seq,
            },
        }
    }

    fn on_received(
        &mut self,
        ctx: &NodeContext,
        cfg: &MacConfig,
        now: Micros,
        rdv: RdvId,
        packet: Packet,
        out: &mut Vec<MacOutput>,
    ) -> Option<Phase> {
        match &packet.kind {
            PacketKind::Superframe(sf) => {
                let sf = sf.as_ref().clone();
                self.on_superframe(now, &sf, cfg.control_bits, out);
                None
            }
            PacketKind::CtAck { rdv: acked } => {
                let Some(session) = self
                    .session
                    .as_mut()
                    .filter(|s| s.rdv == *acked && s.stage == Stage::AwaitingCtAck)
                else {
                    out.push(MacOutput::Noop("unexpected ct_ack"));
                    return None;
                };
                session.stage = Stage::CtTransfer;
                let sf = session
                    .superframe
                    .as_ref()
                    .expect("ct session has a superframe");
                for (k, slot) in sf.ct_slots().enumerate() {
                    out.push(MacOutput::Timer {
                        at: slot.start,
                        tag: TimerTag::CtSlot(*acked, k as u32),
                    });
                }
                out.push(MacOutput::Timer {
                    at: sf.reserved_end(),
                    tag: TimerTag::SessionEnd(*acked),
                });
                None
            }
            PacketKind::NoctRequest {
                rdv: req,
                start,
                duration,
            } => {
                let r = Reservation {
                    rdv: *req,
                    start: *start,
                    end: start + duration,
                    role: ReservationRole::Receiver,
                    forward_to: self.node,
                };
                let accepted = self.try_reserve(r) == ReservationDecision::Accept;
                if accepted {
                    out.push(MacOutput::Timer {
                        at: r.start,
                        tag: TimerTag::ReservationStart(*req),
                    });
                    out.push(MacOutput::Timer {
                        at: r.end,
                        tag: TimerTag::ReservationEnd(*req),
                    });
                }
                let reply = Packet {
                    seq: packet.seq,
                    size_bits: cfg.control_bits,
                    source: self.node,
                    destination: req.owner,
                    kind: PacketKind::NoctReply {
                        rdv: *req,
                        accepted,
                    },
                };
                out.push(MacOutput::Transmit {
                    at: now,
                    rdv: *req,
                    packet: reply,
                    to: vec![req.owner],
                });
                Some(Phase::Transmitting)
            }
            PacketKind::NoctReply { rdv: req, accepted } => {
                let Some(session) = self
                    .session
                    .as_mut()
                    .filter(|s| s.rdv == *req && s.stage == Stage::AwaitingNoCtReply)
                else {
                    out.push(MacOutput::Noop("unexpected noct_reply"));
                    return None;
                };
                if !accepted {
                    self.fail_session(ctx, cfg, now, out);
                    return None;
                }
                session.stage = Stage::NoctTransfer;
                let start = session.data_start;
                for k in 0..session.batch {
                    out.push(MacOutput::Timer {
                        at: start + k as Micros * cfg.slot,
                        tag: TimerTag::NoctSlot(*req, k as u32),
                    });
                }
                out.push(MacOutput::Timer {
                    at: start + session.batch as Micros * cfg.slot,
                    tag: TimerTag::SessionEnd(*req),
                });
                None
            }
            PacketKind::DataAck { origin, seq } => {
                if let Some(session) = self.session.as_mut().filter(|s| s.rdv == rdv) {
                    for (i, p) in self.pending.iter().take(session.batch).enumerate() {
                        if p.packet.source == *origin && p.packet.seq == *seq {
                            session.acked[i] = true;
                        }
                    }
                } else {
                    out.push(MacOutput::Noop("late data_ack"));
                }
                None
            }
            PacketKind::Data => {
                let Some(res) = self.reservation(rdv).copied() else {
                    out.push(MacOutput::Noop("data outside any reservation"));
                    return None;
                };
                match res.role {
                    ReservationRole::Helper => {
                        out.push(MacOutput::Transmit {
                            at: now,
                            rdv,
                            packet,
                            to: vec![res.forward_to],
                        });
                        Some(Phase::CtCooperative)
                    }
                    ReservationRole::Receiver => {
                        self.accept_data(ctx, now, &packet, out);
                        let ack = self.ack_for(cfg, &packet, rdv.owner);
                        out.push(MacOutput::Transmit {
                            at: now,
                            rdv,
                            packet: ack,
                            to: vec![rdv.owner],
                        });
                        Some(Phase::Receiving)
                    }
                    ReservationRole::Sender => {
                        out.push(MacOutput::Noop("own data echoed"));
                        None
                    }
                }
            }
            PacketKind::CtRequest | PacketKind::CandidateReply => {
                out.push(MacOutput::Noop("station traffic on the air"));
                None
            }
        }
    }

    /// Handles a superframe addressed to this node.
    ///
    /// Helpers reserve the rendezvous and stay awake through it; only the
    /// leader answers with a `ct_ack`. The next hop reserves as receiver.
    pub fn on_superframe(
        &mut self,
        now: Micros,
        sf: &Superframe,
        ack_bits: u64,
        out: &mut Vec<MacOutput>,
    ) {
        let end = sf.reserved_end();
        if sf.helpers.contains(&self.node) {
            let r = Reservation {
                rdv: sf.rdv,
                start: sf.origin_time,
                end,
                role: ReservationRole::Helper,
                forward_to: sf.next_hop,
            };
            if self.try_reserve(r) == ReservationDecision::Reject {
                out.push(MacOutput::Noop("helper already committed"));
                return;
            }
            out.push(MacOutput::Timer {
                at: end,
                tag: TimerTag::ReservationEnd(sf.rdv),
            });
            if sf.leader == Some(self.node) {
                let ack = Packet {
                    seq: u64::from(sf.rdv.n),
                    size_bits: ack_bits,
                    source: self.node,
                    destination: sf.transmitter,
                    kind: PacketKind::CtAck { rdv: sf.rdv },
                };
                out.push(MacOutput::Transmit {
                    at: now,
                    rdv: sf.rdv,
                    packet: ack,
                    to: vec![sf.transmitter],
                });
            }
        } else if sf.next_hop == self.node {
            let r = Reservation {
                rdv: sf.rdv,
                start: sf.origin_time,
                end,
                role: ReservationRole::Receiver,
                forward_to: self.node,
            };
            if self.try_reserve(r) == ReservationDecision::Accept {
                out.push(MacOutput::Timer {
                    at: end,
                    tag: TimerTag::ReservationEnd(sf.rdv),
                });
            }
        } else {
            out.push(MacOutput::Noop("superframe not for us"));
        }
    }
}
