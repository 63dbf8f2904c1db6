//! The event loop.
//!
//! Every record charges at most one node, the record's subject. Before a
//! node is touched its battery is first brought up to the current instant
//! (idle listening while the radio is on, sleep otherwise); per-bit costs
//! are added on top.

use std::collections::BTreeMap;
use std::io::Write;

use crate::config::{Role, ScenarioConfig};
use crate::energy::{
    crossover_distance, idle_energy, rx_energy, sleep_energy, tx_energy, Activity, Battery,
    RadioEnergyParams,
};
use crate::engine::channel::{resolve_slot, Channel, Reception, Transmission};
use crate::engine::metrics::{Metrics, NodeEnergy, TimelineSample};
use crate::engine::queue::EventQueue;
use crate::engine::topology::Topology;
use crate::error::{ConfigError, SimError};
use crate::mac::{
    build_schedules, DutySchedule, HopGraph, MacConfig, MacEvent, MacOutput, MacState, NodeContext,
    Packet, PacketKind, RdvId, TimerTag, TxMode,
};
use crate::rng::{SimRng, TRAFFIC_STREAM};
use crate::selection::{handle_ct_request, CtRequest, ElectedList, EnergyRegistry, StationReading};
use crate::trace::{Detail, TraceWriter};
use crate::types::{micros_to_secs, secs_to_micros, Micros, NodeId};

const PRIO_RESOLVE: u8 = 0;
const PRIO_DEPLETION: u8 = 1;
const PRIO_WINDOW_CLOSE: u8 = 2;
const PRIO_DEFAULT: u8 = 3;
const PRIO_FINISH: u8 = 9;

#[derive(Debug, Clone)]
enum Ev {
    Resolve(Micros),
    Depletion(usize, u64),
    WindowOpen(usize),
    WindowClose(usize),
    Timer(usize, TimerTag),
    Traffic(usize, Packet),
    Station(CtRequest),
    Reply {
        node: usize,
        elected: ElectedList,
        mean: Option<f64>,
    },
    Wake {
        node: usize,
        rdv: RdvId,
        until: Micros,
        as_receiver: bool,
        forward_to: NodeId,
    },
    Finish,
}

struct NodeRt {
    id: NodeId,
    role: Role,
    station: bool,
    battery: Battery,
    mac: MacState,
    schedule: Option<DutySchedule>,
    awake: bool,
    awake_since: Micros,
    last_accrual: Micros,
    depletion_gen: u64,
    depletion_at: Option<Micros>,
    death: Option<Micros>,
}

#[derive(Default)]
struct Counters {
    offered: u64,
    delivered: u64,
    dropped: u64,
    collisions: u64,
    ct_sessions: u64,
    noct_sessions: u64,
}

pub struct Simulation<W: Write> {
    cfg: MacConfig,
    params: RadioEnergyParams,
    crossover: f64,
    topo: Topology,
    nodes: Vec<NodeRt>,
    ctxs: Vec<NodeContext>,
    queue: EventQueue<Ev>,
    channel: Channel,
    trace: TraceWriter<W>,
    now: Micros,
    horizon: Micros,
    counters: Counters,
    sources: Vec<usize>,
    timeline: Vec<TimelineSample>,
    sample_every: Micros,
    next_sample: Micros,
    stop_when_idle: bool,
    traffic_left: u64,
    finished: bool,
    config_sha256: String,
    seed: u64,
    mode: String,
}

/// Runs `config` with `seed`, streaming the trace into `trace`.
pub fn run<W: Write>(
    config: &ScenarioConfig,
    seed: u64,
    trace: W,
) -> Result<(Metrics, W), SimError> {
    let mut sim = Simulation::new(config, seed, trace)?;
    sim.run_to_end()?;
    sim.finish()
}

/// [`run`] with the trace kept in memory.
pub fn run_in_memory(config: &ScenarioConfig, seed: u64) -> Result<(Metrics, String), SimError> {
    let (metrics, bytes) = run(config, seed, Vec::new())?;
    Ok((metrics, String::from_utf8(bytes).expect("trace is UTF-8")))
}

fn schedules_for(
    topo: &Topology,
    cfg: &MacConfig,
) -> Result<BTreeMap<NodeId, DutySchedule>, ConfigError> {
    let unrouted_depth = topo.max_depth() + 1;
    let mut graph = HopGraph::new();
    let sensors: Vec<_> = topo
        .nodes
        .iter()
        .filter(|n| n.role != Role::Wilem)
        .collect();
    for n in &sensors {
        graph.add_node(
            n.id,
            topo.depth.get(&n.id).copied().unwrap_or(unrouted_depth),
        );
    }
    for (i, a) in sensors.iter().enumerate() {
        for b in &sensors[i + 1..] {
            if a.position.distance(&b.position) <= topo.base_range {
                graph.add_link(a.id, b.id);
            }
        }
    }
    for (&from, &to) in &topo.routes {
        graph.add_link(from, to);
    }
    build_schedules(&graph, cfg.frame, cfg.active)
}

impl<W: Write> Simulation<W> {
    pub fn new(config: &ScenarioConfig, seed: u64, trace: W) -> Result<Self, SimError> {
        config.validate()?;
        let cfg = config.mac_config()?;
        let params = config.radio;
        let topo = Topology::from_spec(&config.topology, seed)?;
        let schedules = schedules_for(&topo, &cfg)?;

        let mut nodes = Vec::with_capacity(topo.nodes.len());
        let mut ctxs = Vec::with_capacity(topo.nodes.len());
        for info in &topo.nodes {
            let next_hop = topo.routes.get(&info.id).copied();
            let next_hop_distance = next_hop.map(|h| topo.distance(info.id, h)).unwrap_or(0.0);
            let helper_candidates = if next_hop.is_some() {
                topo.neighbors(info.id)
                    .into_iter()
                    .filter(|n| Some(*n) != next_hop && *n != topo.fr)
                    .collect()
            } else {
                Vec::new()
            };
            ctxs.push(NodeContext {
                id: info.id,
                next_hop,
                next_hop_schedule: next_hop.and_then(|h| schedules.get(&h).copied()),
                next_hop_distance,
                next_hop_in_reach: next_hop_distance <= topo.base_range,
                helper_candidates,
                is_sink: info.id == topo.fr,
            });
            nodes.push(NodeRt {
                id: info.id,
                role: info.role,
                station: info.role == Role::Wilem,
                battery: Battery::new(info.battery_j),
                mac: MacState::new(info.id),
                schedule: schedules.get(&info.id).copied(),
                awake: false,
                awake_since: 0,
                last_accrual: 0,
                depletion_gen: 0,
                depletion_at: None,
                death: None,
            });
        }

        let sources: Vec<usize> = match &config.traffic.sources {
            Some(ids) => ids
                .iter()
                .enumerate()
                .map(|(k, id)| {
                    let id = NodeId(*id);
                    let i = topo.index_of(id).ok_or_else(|| {
                        ConfigError::invalid(
                            format!("traffic.sources[{k}]"),
                            format!("unknown node {id}"),
                        )
                    })?;
                    if !topo.has_route(id) {
                        return Err(ConfigError::invalid(
                            format!("traffic.sources[{k}]"),
                            format!("node {id} has no route to the final receiver"),
                        ));
                    }
                    Ok(i)
                })
                .collect::<Result<_, _>>()?,
            None => topo
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| n.role == Role::Trn)
                .map(|(i, n)| {
                    if topo.has_route(n.id) {
                        Ok(i)
                    } else {
                        Err(ConfigError::invalid(
                            "traffic.sources",
                            format!("node {} has no route to the final receiver", n.id),
                        ))
                    }
                })
                .collect::<Result<_, _>>()?,
        };

        let config_sha256 = config.hash();
        let trace = TraceWriter::new(trace, &config_sha256, seed)?;
        let mut sim = Self {
            crossover: crossover_distance(&params),
            cfg,
            params,
            topo,
            nodes,
            ctxs,
            queue: EventQueue::new(),
            channel: Channel::default(),
            trace,
            now: 0,
            horizon: config.horizon(),
            counters: Counters::default(),
            sources,
            timeline: Vec::new(),
            sample_every: secs_to_micros(config.output.timeline_interval_s).max(1),
            next_sample: 0,
            stop_when_idle: config.stop_when_idle,
            traffic_left: 0,
            finished: false,
            config_sha256,
            seed,
            mode: config.mac.mode.to_string(),
        };
        sim.schedule_initial(config, seed);
        Ok(sim)
    }

    fn schedule_initial(&mut self, config: &ScenarioConfig, seed: u64) {
        for i in 0..self.nodes.len() {
            if let Some(s) = self.nodes[i].schedule {
                self.push(s.wake_offset, PRIO_DEFAULT, Ev::WindowOpen(i));
            }
        }
        let t = &config.traffic;
        let mut rng = SimRng::new(seed, TRAFFIC_STREAM);
        let bits = u64::from(t.packet_size_bytes) * crate::selection::BITS_PER_OCTET;
        for &i in &self.sources.clone() {
            for k in 0..t.packets_per_source {
                let jitter = if t.jitter_s > 0.0 {
                    rng.uniform(0.0, t.jitter_s)
                } else {
                    0.0
                };
                let at = secs_to_micros(t.start_s + f64::from(k) * t.interval_s + jitter);
                let packet = Packet {
                    seq: u64::from(k),
                    size_bits: bits,
                    source: self.nodes[i].id,
                    destination: self.topo.fr,
                    kind: PacketKind::Data,
                };
                if self.push(at, PRIO_DEFAULT, Ev::Traffic(i, packet)) {
                    self.traffic_left += 1;
                }
            }
        }
        self.queue.push(self.horizon, PRIO_FINISH, Ev::Finish);
    }

    /// Queues `ev` unless it falls past the horizon.
    fn push(&mut self, at: Micros, priority: u8, ev: Ev) -> bool {
        if at > self.horizon {
            return false;
        }
        self.queue.push(at, priority, ev);
        true
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while !self.finished {
            let Some((key, ev)) = self.queue.pop() else {
                break;
            };
            self.sample_until(key.time);
            self.now = key.time;
            let check_idle = matches!(ev, Ev::Resolve(_) | Ev::Timer(..) | Ev::Traffic(..));
            self.dispatch(ev)?;
            if check_idle && self.stop_when_idle && !self.finished && self.is_idle() {
                self.finish_all()?;
            }
        }
        Ok(())
    }

    fn is_idle(&self) -> bool {
        self.traffic_left == 0
            && self
                .nodes
                .iter()
                .all(|n| n.death.is_some() || (n.mac.pending_len() == 0 && !n.mac.has_session()))
    }

    fn sample_until(&mut self, t: Micros) {
        while self.next_sample <= t.min(self.horizon) {
            let at = self.next_sample;
            for n in self.nodes.iter().filter(|n| !n.station) {
                self.timeline.push(TimelineSample {
                    t_s: micros_to_secs(at),
                    node: n.id,
                    residual_j: metered(n, at, &self.params),
                });
            }
            self.next_sample += self.sample_every;
        }
    }

    fn dispatch(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Resolve(start) => self.resolve(start),
            Ev::Depletion(i, gen) => self.depletion(i, gen),
            Ev::WindowOpen(i) => {
                if let Some(s) = self.nodes[i].schedule {
                    self.push(
                        self.now + s.active_window,
                        PRIO_WINDOW_CLOSE,
                        Ev::WindowClose(i),
                    );
                    self.push(self.now + s.frame_length, PRIO_DEFAULT, Ev::WindowOpen(i));
                }
                self.mac_event(i, "window_open", MacEvent::WindowOpen, None, Detail::new())
            }
            Ev::WindowClose(i) => self.mac_event(
                i,
                "window_close",
                MacEvent::WindowClose,
                None,
                Detail::new(),
            ),
            Ev::Timer(i, tag) => {
                let d = Detail::new().kv("tag", tag);
                self.mac_event(i, "timer", MacEvent::Timer(tag), None, d)
            }
            Ev::Traffic(i, packet) => {
                self.traffic_left -= 1;
                self.counters.offered += 1;
                if self.nodes[i].death.is_some() {
                    self.counters.dropped += 1;
                    return Ok(());
                }
                let d = Detail::new()
                    .kv("origin", packet.source)
                    .kv("seq", packet.seq)
                    .kv("bits", packet.size_bits);
                self.mac_event(i, "arrival", MacEvent::Arrival(packet), None, d)
            }
            Ev::Station(request) => self.station(request),
            Ev::Reply {
                node,
                elected,
                mean,
            } => {
                let charge = rx_energy(self.cfg.control_bits, &self.params);
                let d = Detail::new().kv("helpers", ids(&elected.helpers)).kv(
                    "leader",
                    elected
                        .leader
                        .map(|l| l.to_string())
                        .unwrap_or_else(|| "none".into()),
                );
                self.mac_event_with(
                    node,
                    "station_reply",
                    Some((charge, Activity::Receive)),
                    d,
                    |own| MacEvent::StationReply {
                        elected,
                        mean_neighbor_residual: mean,
                        own_residual: own,
                    },
                )
            }
            Ev::Wake {
                node,
                rdv,
                until,
                as_receiver,
                forward_to,
            } => {
                let charge = rx_energy(self.cfg.control_bits, &self.params);
                let d = Detail::new()
                    .kv("rdv", rdv)
                    .kv("until", until)
                    .kv("receiver", u8::from(as_receiver));
                let ev = MacEvent::WakeNotice {
                    rdv,
                    until,
                    as_receiver,
                    forward_to,
                };
                self.mac_event(
                    node,
                    "wake_notice",
                    ev,
                    Some((charge, Activity::Receive)),
                    d,
                )
            }
            Ev::Finish => self.finish_all(),
        }
    }

    // -----------------------------------------------------------------------
    // Energy
    // -----------------------------------------------------------------------

    fn accrue(&mut self, i: usize) -> f64 {
        let now = self.now;
        let n = &mut self.nodes[i];
        let dt = now - n.last_accrual;
        n.last_accrual = now;
        if n.station || !n.battery.alive() || dt == 0 {
            return 0.0;
        }
        let secs = micros_to_secs(dt);
        let (amount, activity) = if n.awake {
            (idle_energy(secs, &self.params), Activity::IdleListen)
        } else {
            (sleep_energy(secs, &self.params), Activity::Sleep)
        };
        self.draw(i, amount, activity)
    }

    fn draw(&mut self, i: usize, amount: f64, activity: Activity) -> f64 {
        if self.nodes[i].station {
            return 0.0;
        }
        let drawn = self.nodes[i].battery.drain(amount, activity);
        if drawn.died {
            self.kill(i);
        }
        drawn.amount
    }

    fn kill(&mut self, i: usize) {
        let n = &mut self.nodes[i];
        n.death = Some(self.now);
        n.awake = false;
        self.counters.dropped += n.mac.take_pending().len() as u64;
    }

    fn alive(&self, i: usize) -> bool {
        self.nodes[i].death.is_none()
    }

    fn predict_depletion(&mut self, i: usize) {
        let n = &mut self.nodes[i];
        if n.station || n.death.is_some() {
            return;
        }
        let power = if n.awake {
            self.params.p_idle()
        } else {
            self.params.p_sleep
        };
        let ticks = (n.battery.residual() / power * 1e6).ceil();
        if ticks > (self.horizon - n.last_accrual) as f64 {
            return;
        }
        let at = n.last_accrual + ticks as Micros;
        if n.depletion_at.is_some_and(|t| t <= at) {
            return;
        }
        n.depletion_gen += 1;
        n.depletion_at = Some(at);
        let gen = n.depletion_gen;
        self.push(at, PRIO_DEPLETION, Ev::Depletion(i, gen));
    }

    fn depletion(&mut self, i: usize, gen: u64) -> Result<(), SimError> {
        if !self.alive(i) || self.nodes[i].depletion_gen != gen {
            return Ok(());
        }
        self.nodes[i].depletion_at = None;
        let n = &self.nodes[i];
        let power = if n.awake {
            self.params.p_idle()
        } else {
            self.params.p_sleep
        };
        let due = n.last_accrual as f64 + (n.battery.residual() / power * 1e6).ceil();
        if due > self.now as f64 {
            // the node slept since this was queued
            self.predict_depletion(i);
            return Ok(());
        }
        let before = self.nodes[i].awake;
        let charged = self.accrue(i);
        let mut d = Detail::new();
        if !self.alive(i) {
            d = d.kv("died", 1);
        }
        self.record(Some(i), "depletion", before, charged, d)?;
        self.predict_depletion(i);
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Node events
    // -----------------------------------------------------------------------

    fn record(
        &mut self,
        node: Option<usize>,
        event: &str,
        before: bool,
        charged: f64,
        d: Detail,
    ) -> Result<(), SimError> {
        let (id, after, residual) = match node {
            Some(i) => {
                let n = &self.nodes[i];
                (Some(n.id), n.awake, Some(n.battery.residual()))
            }
            None => (None, false, None),
        };
        self.trace.write(
            self.now,
            id,
            event,
            (before, after),
            charged,
            residual,
            &d.finish(),
        )?;
        Ok(())
    }

    fn mac_event(
        &mut self,
        i: usize,
        name: &str,
        ev: MacEvent,
        extra: Option<(f64, Activity)>,
        d: Detail,
    ) -> Result<(), SimError> {
        self.mac_event_with(i, name, extra, d, move |_| ev)
    }

    /// Accrues, applies `extra`, steps the MAC and applies its outputs.
    fn mac_event_with(
        &mut self,
        i: usize,
        name: &str,
        extra: Option<(f64, Activity)>,
        d: Detail,
        make: impl FnOnce(f64) -> MacEvent,
    ) -> Result<(), SimError> {
        if !self.alive(i) {
            return Ok(());
        }
        let before = self.nodes[i].awake;
        let mut charged = self.accrue(i);
        if let Some((amount, activity)) = extra {
            if self.alive(i) {
                charged += self.draw(i, amount, activity);
            }
        }
        if !self.alive(i) {
            return self.record(Some(i), name, before, charged, d.kv("died", 1));
        }
        let ev = make(self.nodes[i].battery.residual());
        let outputs = self.nodes[i]
            .mac
            .step(&self.ctxs[i], &self.cfg, self.now, ev);
        self.refresh_awake(i);
        let d = d.kv("phase", format!("{:?}", self.nodes[i].mac.phase));
        self.record(Some(i), name, before, charged, d)?;
        self.apply(i, outputs)?;
        self.predict_depletion(i);
        Ok(())
    }

    fn refresh_awake(&mut self, i: usize) {
        let n = &mut self.nodes[i];
        let awake = n.death.is_none() && n.mac.is_awake();
        if awake && !n.awake {
            n.awake_since = self.now;
        }
        n.awake = awake;
    }

    fn apply(&mut self, i: usize, outputs: Vec<MacOutput>) -> Result<(), SimError> {
        for out in outputs {
            if !self.alive(i) {
                break;
            }
            match out {
                MacOutput::Transmit {
                    at,
                    rdv,
                    packet,
                    to,
                } => self.transmit(i, at, rdv, packet, to)?,
                MacOutput::Timer { at, tag } => {
                    self.push(at.max(self.now), PRIO_DEFAULT, Ev::Timer(i, tag));
                }
                MacOutput::StationRequest(request) => {
                    let d_station = self.topo.distance(self.nodes[i].id, self.topo.station);
                    let cost = tx_energy(self.cfg.control_bits, d_station, &self.params);
                    let before = self.nodes[i].awake;
                    let charged = self.draw(i, cost, Activity::Transmit);
                    let mut d = Detail::new()
                        .kv("packets", request.packet_count)
                        .kv("neighbors", ids(&request.neighbor_ids));
                    if !self.alive(i) {
                        d = d.kv("died", 1);
                    } else {
                        self.push(self.now, PRIO_DEFAULT, Ev::Station(request));
                    }
                    self.record(Some(i), "station_request", before, charged, d)?;
                }
                MacOutput::WakeParticipants {
                    rdv,
                    receiver,
                    helpers,
                    helpers_until,
                    until,
                } => {
                    for h in helpers {
                        if let Some(node) = self.topo.index_of(h) {
                            let ev = Ev::Wake {
                                node,
                                rdv,
                                until: helpers_until,
                                as_receiver: false,
                                forward_to: receiver,
                            };
                            self.push(self.now, PRIO_DEFAULT, ev);
                        }
                    }
                    if let Some(node) = self.topo.index_of(receiver) {
                        self.push(
                            self.now,
                            PRIO_DEFAULT,
                            Ev::Wake {
                                node,
                                rdv,
                                until,
                                as_receiver: true,
                                forward_to: receiver,
                            },
                        );
                    }
                }
                MacOutput::Delivered(p) => {
                    self.counters.delivered += 1;
                    let awake = self.nodes[i].awake;
                    self.record(
                        Some(i),
                        "delivered",
                        awake,
                        0.0,
                        Detail::new().kv("origin", p.source).kv("seq", p.seq),
                    )?;
                }
                MacOutput::Dropped(p) => {
                    self.counters.dropped += 1;
                    let awake = self.nodes[i].awake;
                    self.record(
                        Some(i),
                        "dropped",
                        awake,
                        0.0,
                        Detail::new().kv("origin", p.source).kv("seq", p.seq),
                    )?;
                }
                MacOutput::Noop(reason) => {
                    let awake = self.nodes[i].awake;
                    self.record(
                        Some(i),
                        "noop",
                        awake,
                        0.0,
                        Detail::new().kv("reason", reason.replace(' ', "_")),
                    )?;
                }
                MacOutput::SessionStarted { rdv, mode, packets } => {
                    match mode {
                        TxMode::Ct => self.counters.ct_sessions += 1,
                        TxMode::Noct => self.counters.noct_sessions += 1,
                    }
                    let awake = self.nodes[i].awake;
                    let m = if mode == TxMode::Ct { "ct" } else { "noct" };
                    self.record(
                        Some(i),
                        "session",
                        awake,
                        0.0,
                        Detail::new()
                            .kv("rdv", rdv)
                            .kv("mode", m)
                            .kv("packets", packets),
                    )?;
                }
            }
        }
        Ok(())
    }

    fn transmit(
        &mut self,
        i: usize,
        at: Micros,
        rdv: RdvId,
        packet: Packet,
        to: Vec<NodeId>,
    ) -> Result<(), SimError> {
        let q = self.cfg.sub_slot();
        let start = at.max(self.now).div_ceil(q) * q;
        let from = self.nodes[i].id;
        let distance = to
            .iter()
            .map(|t| self.topo.distance(from, *t))
            .fold(0.0, f64::max);
        let cost = tx_energy(packet.size_bits, distance, &self.params);
        let before = self.nodes[i].awake;
        let charged = self.draw(i, cost, Activity::Transmit);
        let mut d = Detail::new()
            .kv("kind", packet.kind.tag())
            .kv("rdv", rdv)
            .kv("origin", packet.source)
            .kv("seq", packet.seq)
            .kv("bits", packet.size_bits)
            .kv("to", ids(&to))
            .kv("start", start);
        if self.alive(i) {
            if self.channel.submit(
                start,
                Transmission {
                    rdv,
                    sender: from,
                    packet,
                    addressees: to,
                },
            ) {
                self.push(start + q, PRIO_RESOLVE, Ev::Resolve(start));
            }
        } else {
            d = d.kv("died", 1).kv("aborted", 1);
        }
        self.record(Some(i), "transmit", before, charged, d)
    }

    fn station(&mut self, request: CtRequest) -> Result<(), SimError> {
        let Some(requester) = self.topo.index_of(request.requester) else {
            return Ok(());
        };
        let mut registry = EnergyRegistry::new();
        for id in std::iter::once(request.requester).chain(request.neighbor_ids.iter().copied()) {
            if let Some(j) = self.topo.index_of(id) {
                let n = &self.nodes[j];
                if n.death.is_none() {
                    registry.update(
                        id,
                        StationReading {
                            residual: metered(n, self.now, &self.params),
                            position: self.topo.position(id),
                        },
                    );
                }
            }
        }
        let reply = handle_ct_request(&request, &registry, &self.params)?;
        let station = self.topo.index_of(self.topo.station);
        let mut d = Detail::new()
            .kv("requester", request.requester)
            .kv("ranked", reply.ranked.len())
            .kv("elected", ids(&reply.elected.helpers));
        if !reply.skipped.is_empty() {
            d = d.kv("skipped", ids(&reply.skipped));
        }
        self.record(station, "station_election", false, 0.0, d)?;
        self.push(
            self.now,
            PRIO_DEFAULT,
            Ev::Reply {
                node: requester,
                elected: reply.elected,
                mean: reply.mean_neighbor_residual,
            },
        );
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Channel
    // -----------------------------------------------------------------------

    fn resolve(&mut self, start: Micros) -> Result<(), SimError> {
        let transmissions = self.channel.take(start);
        let listeners: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| !n.station && n.death.is_none() && n.awake && n.awake_since <= start)
            .map(|n| n.id)
            .collect();
        let mut rdvs: Vec<RdvId> = transmissions.iter().map(|t| t.rdv).collect();
        rdvs.dedup();
        let senders: Vec<NodeId> = transmissions.iter().map(|t| t.sender).collect();
        let d = Detail::new()
            .kv("start", start)
            .kv("senders", ids(&senders))
            .kv(
                "rdvs",
                rdvs.iter()
                    .map(|r| r.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            );
        self.record(None, "channel_resolve", false, 0.0, d)?;

        let topo = &self.topo;
        let receptions = resolve_slot(
            &transmissions,
            &listeners,
            |id| topo.position(id),
            topo.base_range,
            self.crossover,
        );
        for (listener, reception) in receptions {
            let i = self.topo.index_of(listener).expect("listener exists");
            if !self.alive(i) {
                continue;
            }
            match reception {
                Reception::Decoded {
                    rdv,
                    packet,
                    addressed: true,
                } => {
                    let cost = rx_energy(packet.size_bits, &self.params);
                    let d = Detail::new()
                        .kv("kind", packet.kind.tag())
                        .kv("rdv", rdv)
                        .kv("origin", packet.source)
                        .kv("seq", packet.seq)
                        .kv("bits", packet.size_bits)
                        .kv("start", start);
                    self.mac_event(
                        i,
                        "receive",
                        MacEvent::Received { rdv, packet },
                        Some((cost, Activity::Receive)),
                        d,
                    )?;
                }
                Reception::Decoded {
                    rdv,
                    packet,
                    addressed: false,
                } => {
                    let before = self.nodes[i].awake;
                    let mut charged = self.accrue(i);
                    if self.alive(i) {
                        charged += self.draw(
                            i,
                            rx_energy(packet.size_bits, &self.params),
                            Activity::Overhear,
                        );
                    }
                    let mut d = Detail::new()
                        .kv("kind", packet.kind.tag())
                        .kv("rdv", rdv)
                        .kv("bits", packet.size_bits)
                        .kv("start", start);
                    if !self.alive(i) {
                        d = d.kv("died", 1);
                    }
                    self.record(Some(i), "overhear", before, charged, d)?;
                    self.predict_depletion(i);
                }
                Reception::Collision {
                    audible,
                    addressed,
                    bits,
                } => {
                    self.counters.collisions += 1;
                    let before = self.nodes[i].awake;
                    let mut charged = self.accrue(i);
                    let activity = if addressed {
                        Activity::Receive
                    } else {
                        Activity::Overhear
                    };
                    if self.alive(i) {
                        charged += self.draw(i, rx_energy(bits, &self.params), activity);
                    }
                    let mut d = Detail::new()
                        .kv("audible", audible)
                        .kv("addressed", u8::from(addressed))
                        .kv("bits", bits)
                        .kv("start", start);
                    if !self.alive(i) {
                        d = d.kv("died", 1);
                    }
                    self.record(Some(i), "collision", before, charged, d)?;
                    self.predict_depletion(i);
                }
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // End of run
    // -----------------------------------------------------------------------

    fn finish_all(&mut self) -> Result<(), SimError> {
        self.sample_until(self.now);
        for i in 0..self.nodes.len() {
            if self.nodes[i].station || !self.alive(i) {
                continue;
            }
            let before = self.nodes[i].awake;
            let charged = self.accrue(i);
            let d = if self.alive(i) {
                Detail::new()
            } else {
                Detail::new().kv("died", 1)
            };
            self.record(Some(i), "finish", before, charged, d)?;
        }
        self.finished = true;
        Ok(())
    }

    pub fn finish(self) -> Result<(Metrics, W), SimError> {
        let events_processed = self.trace.records();
        let end = self.now;
        let first = self
            .nodes
            .iter()
            .filter(|n| !n.station)
            .filter_map(|n| n.death.map(|t| (t, n.id)))
            .min();
        let trn_death = self
            .sources
            .iter()
            .filter_map(|&i| self.nodes[i].death)
            .min()
            .map(micros_to_secs);
        let mut by_category: BTreeMap<String, f64> = BTreeMap::new();
        let energy_by_node: Vec<NodeEnergy> = self
            .nodes
            .iter()
            .map(|n| {
                let consumed: BTreeMap<String, f64> = n
                    .battery
                    .consumed()
                    .iter()
                    .map(|(a, e)| (a.as_str().to_string(), e))
                    .collect();
                for (k, v) in &consumed {
                    *by_category.entry(k.clone()).or_default() += v;
                }
                NodeEnergy {
                    node: n.id,
                    role: n.role.as_str().to_string(),
                    initial_j: n.battery.initial(),
                    residual_j: n.battery.residual(),
                    consumed_j: consumed,
                    death_time_s: n.death.map(micros_to_secs),
                }
            })
            .collect();
        let c = &self.counters;
        let metrics = Metrics {
            config_sha256: self.config_sha256.clone(),
            seed: self.seed,
            mode: self.mode.clone(),
            network_lifetime_first_death_s: first.map(|(t, _)| micros_to_secs(t)),
            first_dead_node: first.map(|(_, n)| n),
            trn_death_time_s: trn_death,
            packets_offered: c.offered,
            packets_delivered: c.delivered,
            packets_dropped: c.dropped,
            delivery_ratio: if c.offered == 0 {
                0.0
            } else {
                c.delivered as f64 / c.offered as f64
            },
            collisions: c.collisions,
            ct_sessions: c.ct_sessions,
            noct_sessions: c.noct_sessions,
            events_processed,
            end_time_s: micros_to_secs(end),
            energy_by_category_j: by_category,
            energy_by_node,
            timeline: self.timeline,
        };
        let out = self.trace.into_inner()?;
        Ok((metrics, out))
    }
}

/// Residual energy as the station would read it at `t`.
fn metered(n: &NodeRt, t: Micros, params: &RadioEnergyParams) -> f64 {
    if n.death.is_some() {
        return 0.0;
    }
    if n.station {
        return n.battery.residual();
    }
    let power = if n.awake {
        params.p_idle()
    } else {
        params.p_sleep
    };
    let dt = micros_to_secs(t.saturating_sub(n.last_accrual));
    (n.battery.residual() - power * dt).max(0.0)
}

fn ids(list: &[NodeId]) -> String {
    list.iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
