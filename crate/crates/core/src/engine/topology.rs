//! Node placement, roles and routes toward the final receiver.

use std::collections::{BTreeMap, VecDeque};

use crate::config::{GeneratorSpec, NodeSpec, Role, TopologySpec};
use crate::error::ConfigError;
use crate::rng::{SimRng, TOPOLOGY_STREAM};
use crate::types::{NodeId, Position};

const MAX_PLACEMENT_ATTEMPTS: u32 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeInfo {
    pub id: NodeId,
    pub position: Position,
    pub role: Role,
    pub battery_j: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: Vec<NodeInfo>,
    pub base_range: f64,
    pub routes: BTreeMap<NodeId, NodeId>,
    pub depth: BTreeMap<NodeId, u32>,
    pub fr: NodeId,
    pub station: NodeId,
    index: BTreeMap<NodeId, usize>,
}

impl Topology {
    /// Builds from explicit nodes. If any node names a `next_hop` the
    /// routes are taken verbatim; otherwise shortest-hop routes are
    /// computed over the unit-disk graph.
    pub fn from_nodes(
        specs: &[NodeSpec],
        base_range: f64,
        initial_energy: f64,
    ) -> Result<Self, ConfigError> {
        let nodes: Vec<NodeInfo> = specs
            .iter()
            .map(|s| NodeInfo {
                id: NodeId(s.id),
                position: Position::new(s.x, s.y),
                role: s.role,
                battery_j: s.battery_j.unwrap_or(initial_energy),
            })
            .collect();
        let explicit: BTreeMap<NodeId, NodeId> = specs
            .iter()
            .filter_map(|s| s.next_hop.map(|h| (NodeId(s.id), NodeId(h))))
            .collect();
        let mut topo = Self::assemble(nodes, base_range);
        if explicit.is_empty() {
            topo.routes = topo.bfs_routes();
        } else {
            topo.routes = explicit;
        }
        topo.depth = topo.route_depths()?;
        Ok(topo)
    }

    /// Random placement in `[0, width] x [0, height]` with the final
    /// receiver and the station at the centre. Placement is redrawn until
    /// every sensor node can reach the final receiver.
    pub fn generate(
        spec: &GeneratorSpec,
        base_range: f64,
        initial_energy: f64,
        run_seed: u64,
    ) -> Result<Self, ConfigError> {
        let mut rng = SimRng::new(spec.seed.unwrap_or(run_seed), TOPOLOGY_STREAM);
        let centre = Position::new(spec.width / 2.0, spec.height / 2.0);
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let mut nodes = vec![NodeInfo {
                id: NodeId(0),
                position: centre,
                role: Role::Fr,
                battery_j: initial_energy,
            }];
            for i in 1..spec.node_count {
                let p = Position::new(rng.uniform(0.0, spec.width), rng.uniform(0.0, spec.height));
                nodes.push(NodeInfo {
                    id: NodeId(i),
                    position: p,
                    role: Role::Relay,
                    battery_j: initial_energy,
                });
            }
            nodes.push(NodeInfo {
                id: NodeId(spec.node_count),
                position: centre,
                role: Role::Wilem,
                battery_j: initial_energy,
            });
            let mut topo = Self::assemble(nodes, base_range);
            topo.routes = topo.bfs_routes();
            if topo.routes.len() + 1 != spec.node_count as usize {
                continue;
            }
            topo.depth = topo.route_depths()?;
            // the deepest nodes originate traffic
            let mut by_depth: Vec<(u32, NodeId)> = topo
                .depth
                .iter()
                .filter(|(n, _)| **n != topo.fr)
                .map(|(n, d)| (*d, *n))
                .collect();
            by_depth.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for (_, n) in by_depth.into_iter().take(spec.trn_count as usize) {
                let i = topo.index[&n];
                topo.nodes[i].role = Role::Trn;
            }
            return Ok(topo);
        }
        Err(ConfigError::invalid(
            "topology.generator",
            format!("no connected placement found in {MAX_PLACEMENT_ATTEMPTS} attempts; enlarge base_range_m or shrink the area"),
        ))
    }

    pub fn from_spec(spec: &TopologySpec, run_seed: u64) -> Result<Self, ConfigError> {
        match (&spec.nodes, &spec.generator) {
            (Some(nodes), None) => {
                Self::from_nodes(nodes, spec.base_range_m, spec.initial_energy_j)
            }
            (None, Some(g)) => {
                Self::generate(g, spec.base_range_m, spec.initial_energy_j, run_seed)
            }
            _ => Err(ConfigError::invalid(
                "topology",
                "exactly one of `nodes` or `generator` is required",
            )),
        }
    }

    fn assemble(nodes: Vec<NodeInfo>, base_range: f64) -> Self {
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let fr = nodes
            .iter()
            .find(|n| n.role == Role::Fr)
            .map(|n| n.id)
            .unwrap_or(NodeId(0));
        let station = nodes
            .iter()
            .find(|n| n.role == Role::Wilem)
            .map(|n| n.id)
            .unwrap_or(NodeId(u32::MAX));
        Self {
            nodes,
            base_range,
            routes: BTreeMap::new(),
            depth: BTreeMap::new(),
            fr,
            station,
            index,
        }
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn node(&self, id: NodeId) -> &NodeInfo {
        &self.nodes[self.index[&id]]
    }

    pub fn position(&self, id: NodeId) -> Position {
        self.node(id).position
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        self.position(a).distance(&self.position(b))
    }

    pub fn is_sensor(&self, id: NodeId) -> bool {
        id != self.station
    }

    /// Sensor nodes within base range of `id`, excluding `id`.
    pub fn neighbors(&self, id: NodeId) -> Vec<NodeId> {
        let p = self.position(id);
        self.nodes
            .iter()
            .filter(|n| {
                n.id != id && n.role != Role::Wilem && n.position.distance(&p) <= self.base_range
            })
            .map(|n| n.id)
            .collect()
    }

    fn bfs_routes(&self) -> BTreeMap<NodeId, NodeId> {
        let mut routes = BTreeMap::new();
        let mut seen = BTreeMap::from([(self.fr, ())]);
        let mut queue = VecDeque::from([self.fr]);
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if seen.insert(v, ()).is_none() {
                    routes.insert(v, u);
                    queue.push_back(v);
                }
            }
        }
        routes
    }

    fn route_depths(&self) -> Result<BTreeMap<NodeId, u32>, ConfigError> {
        let mut depth = BTreeMap::from([(self.fr, 0u32)]);
        for n in &self.nodes {
            if n.role == Role::Wilem || n.id == self.fr {
                continue;
            }
            let mut path = vec![n.id];
            let mut cur = n.id;
            while let Some(&next) = self.routes.get(&cur) {
                if let Some(&d) = depth.get(&next) {
                    for (k, p) in path.iter().rev().enumerate() {
                        depth.insert(*p, d + 1 + k as u32);
                    }
                    break;
                }
                if path.contains(&next) {
                    return Err(ConfigError::invalid(
                        "topology.nodes",
                        format!("routing loop through node {next}"),
                    ));
                }
                path.push(next);
                cur = next;
            }
        }
        Ok(depth)
    }

    pub fn max_depth(&self) -> u32 {
        self.depth.values().copied().max().unwrap_or(0)
    }

    pub fn has_route(&self, id: NodeId) -> bool {
        id != self.fr && self.depth.contains_key(&id)
    }
}
