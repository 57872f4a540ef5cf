//! Three-layer data-center topology (core / aggregation / edge / hosts) with
//! deterministic minimal-hop routing.
//!
//! Every link is stored with its upper-layer endpoint as `a` and its
//! lower-layer endpoint as `b`, so traversing a link `a -> b` descends the
//! hierarchy and `b -> a` ascends it.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;

use crate::engine::{Direction, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct LinkId(pub u32);

/// A node-local port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InterfaceId {
    pub node: NodeId,
    pub port: u16,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

impl fmt::Display for InterfaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:p{}", self.node, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Core,
    Aggregation,
    Edge,
    Host,
    /// A client outside the data center, attached to a core switch through a
    /// link that is not counted as data-center traffic.
    External,
}

impl Role {
    pub fn is_switch(self) -> bool {
        matches!(self, Role::Core | Role::Aggregation | Role::Edge)
    }

    pub fn is_endpoint(self) -> bool {
        matches!(self, Role::Host | Role::External)
    }

    fn layer(self) -> u8 {
        match self {
            Role::Core => 3,
            Role::Aggregation => 2,
            Role::Edge => 1,
            Role::Host => 0,
            Role::External => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub role: Role,
    pub name: String,
    pub ports: Vec<LinkId>,
    /// Rack index (the edge switch's ordinal) for hosts.
    pub rack: Option<usize>,
    pub ip: Option<Ipv4Addr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkParams {
    pub delay: SimTime,
    /// Bytes per second.
    pub bandwidth: u64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            delay: SimTime::from_micros(10),
            bandwidth: 125_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Link {
    pub id: LinkId,
    /// Upper endpoint.
    pub a: InterfaceId,
    /// Lower endpoint.
    pub b: InterfaceId,
    pub params: LinkParams,
    /// Outside the data-center network (not counted as in-DC traffic).
    pub external: bool,
}

impl Link {
    pub fn direction_from(&self, node: NodeId) -> Option<Direction> {
        if self.a.node == node {
            Some(Direction::AtoB)
        } else if self.b.node == node {
            Some(Direction::BtoA)
        } else {
            None
        }
    }

    pub fn other_end(&self, node: NodeId) -> Option<InterfaceId> {
        match self.direction_from(node)? {
            Direction::AtoB => Some(self.b),
            Direction::BtoA => Some(self.a),
        }
    }
}

/// Counts for [`Topology::build_three_layer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreeLayerShape {
    pub cores: usize,
    pub aggs_per_core: usize,
    pub racks_per_agg: usize,
    pub hosts_per_rack: usize,
}

impl ThreeLayerShape {
    pub fn new(cores: usize, aggs_per_core: usize, racks_per_agg: usize, hosts_per_rack: usize) -> Self {
        ThreeLayerShape { cores, aggs_per_core, racks_per_agg, hosts_per_rack }
    }

    pub fn aggregation_count(&self) -> usize {
        self.cores * self.aggs_per_core
    }

    pub fn edge_count(&self) -> usize {
        self.aggregation_count() * self.racks_per_agg
    }

    pub fn host_count(&self) -> usize {
        self.edge_count() * self.hosts_per_rack
    }

    /// Host uplinks + edge uplinks + full aggregation/core bipartite mesh.
    pub fn link_count(&self) -> usize {
        self.host_count() + self.edge_count() + self.aggregation_count() * self.cores
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("all topology counts must be at least 1 (got {0:?})")]
    EmptyLayer(ThreeLayerShape),
    #[error("at most 254 hosts per rack are addressable")]
    TooManyHosts,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("{0} is not a switch")]
    NotASwitch(NodeId),
    #[error("source and destination are the same node {0}")]
    SameEndpoints(NodeId),
    #[error("no path from {0} to {1}")]
    Unreachable(NodeId, NodeId),
    #[error("topology invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone)]
pub struct Topology {
    nodes: Vec<Node>,
    links: Vec<Link>,
    shape: ThreeLayerShape,
    by_ip: BTreeMap<Ipv4Addr, NodeId>,
    /// `dist[dst][node]`: hop distance from `node` to `dst`.
    dist: Vec<Vec<u32>>,
}

const UNREACHABLE: u32 = u32::MAX;

impl Topology {
    /// Builds the strict three-layer tree. Nodes are numbered breadth-first
    /// from the core: cores, then aggregation, edge, and host nodes. Every
    /// aggregation switch uplinks to every core switch; the first
    /// `aggs_per_core` aggregation switches form core 0's group, and so on.
    pub fn build_three_layer(shape: ThreeLayerShape, params: LinkParams) -> Result<Topology, TopologyError> {
        if shape.cores == 0 || shape.aggs_per_core == 0 || shape.racks_per_agg == 0 || shape.hosts_per_rack == 0 {
            return Err(TopologyError::EmptyLayer(shape));
        }
        if shape.hosts_per_rack > 254 {
            return Err(TopologyError::TooManyHosts);
        }
        let mut topo = Topology {
            nodes: Vec::new(),
            links: Vec::new(),
            shape,
            by_ip: BTreeMap::new(),
            dist: Vec::new(),
        };
        let cores: Vec<NodeId> = (0..shape.cores)
            .map(|i| topo.add_node(Role::Core, format!("core{i}"), None, None))
            .collect();
        let aggs: Vec<NodeId> = (0..shape.aggregation_count())
            .map(|i| topo.add_node(Role::Aggregation, format!("agg{i}"), None, None))
            .collect();
        let edges: Vec<NodeId> = (0..shape.edge_count())
            .map(|i| topo.add_node(Role::Edge, format!("tor{i}"), None, None))
            .collect();
        let mut hosts = Vec::with_capacity(shape.host_count());
        for rack in 0..edges.len() {
            for h in 0..shape.hosts_per_rack {
                let ip = Ipv4Addr::new(10, (rack >> 8) as u8, (rack & 0xff) as u8, (h + 1) as u8);
                hosts.push(topo.add_node(Role::Host, format!("h{rack}.{h}"), Some(rack), Some(ip)));
            }
        }
        for &agg in &aggs {
            for &core in &cores {
                topo.add_link(core, agg, params, false);
            }
        }
        for (i, &edge) in edges.iter().enumerate() {
            topo.add_link(aggs[i / shape.racks_per_agg], edge, params, false);
        }
        for (i, &host) in hosts.iter().enumerate() {
            topo.add_link(edges[i / shape.hosts_per_rack], host, params, false);
        }
        topo.recompute_routes();
        Ok(topo)
    }

    /// Attaches an out-of-data-center endpoint to core switch 0.
    pub fn attach_external(&mut self, ip: Ipv4Addr, params: LinkParams) -> NodeId {
        let id = self.add_node(Role::External, "internet".to_string(), None, Some(ip));
        let core = self
            .nodes
            .iter()
            .find(|n| n.role == Role::Core)
            .map(|n| n.id)
            .expect("three-layer topology has a core");
        self.add_link(core, id, params, true);
        self.recompute_routes();
        id
    }

    fn add_node(&mut self, role: Role, name: String, rack: Option<usize>, ip: Option<Ipv4Addr>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        if let Some(ip) = ip {
            self.by_ip.insert(ip, id);
        }
        self.nodes.push(Node { id, role, name, ports: Vec::new(), rack, ip });
        id
    }

    fn add_link(&mut self, upper: NodeId, lower: NodeId, params: LinkParams, external: bool) -> LinkId {
        let id = LinkId(self.links.len() as u32);
        let a = InterfaceId { node: upper, port: self.nodes[upper.0 as usize].ports.len() as u16 };
        let b = InterfaceId { node: lower, port: self.nodes[lower.0 as usize].ports.len() as u16 };
        self.nodes[upper.0 as usize].ports.push(id);
        self.nodes[lower.0 as usize].ports.push(id);
        self.links.push(Link { id, a, b, params, external });
        id
    }

    fn recompute_routes(&mut self) {
        let n = self.nodes.len();
        self.dist = (0..n)
            .map(|dst| {
                let mut d = vec![UNREACHABLE; n];
                d[dst] = 0;
                let mut queue = VecDeque::from([NodeId(dst as u32)]);
                while let Some(u) = queue.pop_front() {
                    for v in self.neighbors(u) {
                        if d[v.0 as usize] == UNREACHABLE {
                            d[v.0 as usize] = d[u.0 as usize] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                d
            })
            .collect();
    }

    pub fn shape(&self) -> ThreeLayerShape {
        self.shape
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, TopologyError> {
        self.nodes.get(id.0 as usize).ok_or(TopologyError::UnknownNode(id))
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0 as usize]
    }

    pub fn role(&self, id: NodeId) -> Option<Role> {
        self.nodes.get(id.0 as usize).map(|n| n.role)
    }

    pub fn ip(&self, id: NodeId) -> Option<Ipv4Addr> {
        self.nodes.get(id.0 as usize).and_then(|n| n.ip)
    }

    pub fn node_by_ip(&self, ip: Ipv4Addr) -> Option<NodeId> {
        self.by_ip.get(&ip).copied()
    }

    pub fn hosts(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.role == Role::Host)
    }

    pub fn switches(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.role.is_switch())
    }

    pub fn rack_of(&self, host: NodeId) -> Option<usize> {
        self.nodes.get(host.0 as usize).and_then(|n| n.rack)
    }

    pub fn rack_count(&self) -> usize {
        self.shape.edge_count()
    }

    /// The link behind an interface.
    pub fn link_at(&self, iface: InterfaceId) -> Option<&Link> {
        let node = self.nodes.get(iface.node.0 as usize)?;
        node.ports.get(iface.port as usize).map(|l| &self.links[l.0 as usize])
    }

    /// The node on the far side of an interface.
    pub fn peer(&self, iface: InterfaceId) -> Option<NodeId> {
        self.link_at(iface)?.other_end(iface.node).map(|i| i.node)
    }

    /// The local interface on `node` that faces `neighbor`.
    pub fn interface_toward(&self, node: NodeId, neighbor: NodeId) -> Option<InterfaceId> {
        let n = self.nodes.get(node.0 as usize)?;
        n.ports.iter().enumerate().find_map(|(port, l)| {
            let link = &self.links[l.0 as usize];
            (link.other_end(node)?.node == neighbor).then_some(InterfaceId { node, port: port as u16 })
        })
    }

    fn neighbors(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes[node.0 as usize]
            .ports
            .iter()
            .filter_map(move |l| self.links[l.0 as usize].other_end(node).map(|i| i.node))
    }

    pub fn distance(&self, src: NodeId, dst: NodeId) -> Option<u32> {
        let d = *self.dist.get(dst.0 as usize)?.get(src.0 as usize)?;
        (d != UNREACHABLE).then_some(d)
    }

    /// Next interface out of `node` on the deterministic route to `dst`:
    /// the neighbor one hop closer with the lowest node id.
    fn next_interface(&self, node: NodeId, dst: NodeId) -> Result<InterfaceId, TopologyError> {
        let here = self.distance(node, dst).ok_or(TopologyError::Unreachable(node, dst))?;
        let mut best: Option<(NodeId, InterfaceId)> = None;
        for (port, l) in self.nodes[node.0 as usize].ports.iter().enumerate() {
            let Some(peer) = self.links[l.0 as usize].other_end(node) else { continue };
            if self.distance(peer.node, dst) == Some(here - 1) && best.is_none_or(|(b, _)| peer.node < b) {
                best = Some((peer.node, InterfaceId { node, port: port as u16 }));
            }
        }
        best.map(|(_, i)| i).ok_or(TopologyError::Unreachable(node, dst))
    }

    /// Minimal-hop path as an ordered link list.
    pub fn shortest_path(&self, src: NodeId, dst: NodeId) -> Result<Vec<LinkId>, TopologyError> {
        self.node(src)?;
        self.node(dst)?;
        if src == dst {
            return Err(TopologyError::SameEndpoints(src));
        }
        let mut path = Vec::new();
        let mut at = src;
        while at != dst {
            let iface = self.next_interface(at, dst)?;
            let link = self.link_at(iface).expect("interface has a link");
            path.push(link.id);
            at = link.other_end(at).expect("link touches node").node;
        }
        Ok(path)
    }

    /// Node sequence of [`Topology::shortest_path`], including both ends.
    pub fn path_nodes(&self, src: NodeId, dst: NodeId) -> Result<Vec<NodeId>, TopologyError> {
        let links = self.shortest_path(src, dst)?;
        let mut nodes = vec![src];
        let mut at = src;
        for l in links {
            at = self.link(l).other_end(at).expect("contiguous path").node;
            nodes.push(at);
        }
        Ok(nodes)
    }

    /// The first interface on the route from switch `sw` toward `dst`.
    pub fn egress_interface(&self, sw: NodeId, dst: NodeId) -> Result<InterfaceId, TopologyError> {
        let node = self.node(sw)?;
        self.node(dst)?;
        if !node.role.is_switch() {
            return Err(TopologyError::NotASwitch(sw));
        }
        if sw == dst {
            return Err(TopologyError::SameEndpoints(sw));
        }
        self.next_interface(sw, dst)
    }

    /// Checks connectivity, single-edge host attachment and strict layering.
    pub fn check_invariants(&self) -> Result<(), TopologyError> {
        let bad = |m: String| Err(TopologyError::Invariant(m));
        for n in &self.nodes {
            if self.distance(n.id, NodeId(0)).is_none() {
                return bad(format!("{} is disconnected", n.id));
            }
            if n.role == Role::Host {
                let edges = self
                    .neighbors(n.id)
                    .filter(|p| self.role(*p) == Some(Role::Edge))
                    .count();
                if edges != 1 || n.ports.len() != 1 {
                    return bad(format!("host {} must attach to exactly one edge switch", n.id));
                }
            }
        }
        for l in &self.links {
            let (ua, lb) = (self.nodes[l.a.node.0 as usize].role, self.nodes[l.b.node.0 as usize].role);
            let ok = match (ua, lb) {
                (Role::Core, Role::External) => l.external,
                (u, b) => !l.external && u.layer() == b.layer() + 1 && b != Role::External,
            };
            if !ok {
                return bad(format!("link {} joins {:?} and {:?}", l.id, ua, lb));
            }
        }
        Ok(())
    }
}
