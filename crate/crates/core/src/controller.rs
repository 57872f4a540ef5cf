//! SDN controller application: distribution-tree computation and mirroring
//! flow programming for one replication pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::net::{Ipv4Addr, SocketAddrV4};

use crate::fabric::{Action, Fabric, FabricError, FlowEntry, MatchFields, SetField};
use crate::topology::{InterfaceId, NodeId, Topology, TopologyError};
use crate::transport::{Reserved, TCP_PROTOCOL};

/// Priority of mirroring entries; anything above the implicit miss rule.
pub const MIRROR_PRIORITY: u16 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub node: NodeId,
    pub ip: Ipv4Addr,
}

/// Port pair of one pipeline hop, D_{j} -> D_{j+1} with the client as D_0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HopPorts {
    pub src_port: u16,
    pub dst_port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineSpec {
    pub id: u64,
    pub client: Endpoint,
    pub data_nodes: Vec<Endpoint>,
    /// `hops[j]` carries D_j -> D_{j+1}; `hops.len() == data_nodes.len()`.
    pub hops: Vec<HopPorts>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("pipeline has no data nodes")]
    Empty,
    #[error("data node {0} appears twice")]
    Duplicate(NodeId),
    #[error("pipeline has {nodes} data nodes but {hops} hop port pairs")]
    HopMismatch { nodes: usize, hops: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

impl PipelineSpec {
    pub fn k(&self) -> usize {
        self.data_nodes.len()
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.data_nodes.is_empty() {
            return Err(ControllerError::Empty);
        }
        let mut seen = BTreeSet::new();
        for d in &self.data_nodes {
            if !seen.insert(d.node) {
                return Err(ControllerError::Duplicate(d.node));
            }
        }
        if self.hops.len() != self.data_nodes.len() {
            return Err(ControllerError::HopMismatch { nodes: self.data_nodes.len(), hops: self.hops.len() });
        }
        Ok(())
    }

    /// Sender side of hop `j` (0 = client).
    pub fn hop_src(&self, j: usize) -> SocketAddrV4 {
        let ip = if j == 0 { self.client.ip } else { self.data_nodes[j - 1].ip };
        SocketAddrV4::new(ip, self.hops[j].src_port)
    }

    /// Receiver side of hop `j`, which is D_{j+1}.
    pub fn hop_dst(&self, j: usize) -> SocketAddrV4 {
        SocketAddrV4::new(self.data_nodes[j].ip, self.hops[j].dst_port)
    }

    /// Match fields for client -> D_1 segments.
    pub fn client_match(&self) -> MatchFields {
        let (src, dst) = (self.hop_src(0), self.hop_dst(0));
        MatchFields {
            src_ip: Some(*src.ip()),
            dst_ip: Some(*dst.ip()),
            src_port: Some(src.port()),
            dst_port: Some(dst.port()),
            protocol: Some(TCP_PROTOCOL),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchPlan {
    /// I_c: egress toward the client.
    pub toward_client: InterfaceId,
    /// I_D: egresses toward each data node.
    pub toward_data: BTreeSet<InterfaceId>,
    /// I_D - I_c.
    pub forwarding: BTreeSet<InterfaceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TreePlan {
    pub switches: BTreeMap<NodeId, SwitchPlan>,
}

impl TreePlan {
    pub fn forwarding(&self, sw: NodeId) -> Option<&BTreeSet<InterfaceId>> {
        self.switches.get(&sw).map(|p| &p.forwarding)
    }
}

/// Per-switch forwarding sets for the client's distribution tree.
pub fn compute_tree(topo: &Topology, p: &PipelineSpec) -> Result<TreePlan, ControllerError> {
    p.validate()?;
    let mut on_tree = BTreeSet::new();
    for d in &p.data_nodes {
        if d.node == p.client.node {
            continue;
        }
        for n in topo.path_nodes(p.client.node, d.node)? {
            if topo.node(n)?.role.is_switch() {
                on_tree.insert(n);
            }
        }
    }
    let mut plan = TreePlan::default();
    for sw in on_tree {
        let toward_client = topo.egress_interface(sw, p.client.node)?;
        let toward_data = p
            .data_nodes
            .iter()
            .map(|d| topo.egress_interface(sw, d.node))
            .collect::<Result<BTreeSet<_>, _>>()?;
        let forwarding = toward_data.iter().copied().filter(|i| *i != toward_client).collect();
        plan.switches.insert(sw, SwitchPlan { toward_client, toward_data, forwarding });
    }
    Ok(plan)
}

/// Flow entries realizing `plan`: every tree switch outputs unmodified
/// copies toward switches and D_1 first, then, for each mirror target it
/// attaches directly, rewrites the header to the target's hop and outputs.
pub fn program_mirroring(topo: &Topology, plan: &TreePlan, p: &PipelineSpec) -> Vec<(NodeId, FlowEntry)> {
    let d1 = p.data_nodes[0].node;
    let mut installs = Vec::new();
    for (&sw, sp) in &plan.switches {
        let mut plain = Vec::new();
        let mut rewrites = Vec::new();
        for &iface in &sp.forwarding {
            let peer = topo.peer(iface);
            match p.data_nodes.iter().position(|d| Some(d.node) == peer) {
                Some(j) if peer != Some(d1) => rewrites.push((j, iface)),
                _ => plain.push(Action::Output(iface)),
            }
        }
        let mut actions = plain;
        rewrites.sort();
        for (j, iface) in rewrites {
            // Target D_{j+1} (0-based j >= 1) expects hop j's header.
            let (src, dst) = (p.hop_src(j), p.hop_dst(j));
            actions.extend([
                Action::SetField(SetField::SrcIp(*src.ip())),
                Action::SetField(SetField::DstIp(*dst.ip())),
                Action::SetField(SetField::SrcPort(src.port())),
                Action::SetField(SetField::DstPort(dst.port())),
                Action::SetField(SetField::Reserved(Reserved::Mirrored)),
                Action::Output(iface),
            ]);
        }
        let entry = FlowEntry { priority: MIRROR_PRIORITY, matches: p.client_match(), actions, cookie: p.id };
        installs.push((sw, entry));
    }
    installs
}

/// Stable, human-readable dump of a plan and its entries.
pub fn plan_dump(plan: &TreePlan, entries: &[(NodeId, FlowEntry)], p: &PipelineSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "pipeline {} k={}", p.id, p.k());
    for (sw, sp) in &plan.switches {
        let fw: Vec<String> = sp.forwarding.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(out, "switch {sw} ingress={} forwarding=[{}]", sp.toward_client, fw.join(","));
        for (_, e) in entries.iter().filter(|(s, _)| s == sw) {
            let _ = writeln!(out, "  {e}");
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Installation {
    pub plan: TreePlan,
    pub entries: Vec<(NodeId, FlowEntry)>,
}

/// Tracks installed pipelines.
#[derive(Debug, Clone, Default)]
pub struct Controller {
    installed: BTreeMap<u64, Installation>,
}

impl Controller {
    pub fn new() -> Self {
        Controller::default()
    }

    pub fn installation(&self, pipeline: u64) -> Option<&Installation> {
        self.installed.get(&pipeline)
    }

    pub fn install(&mut self, topo: &Topology, fabric: &mut Fabric, p: &PipelineSpec) -> Result<&Installation, ControllerError> {
        let plan = compute_tree(topo, p)?;
        let entries = program_mirroring(topo, &plan, p);
        for (sw, e) in &entries {
            fabric.install_entry(*sw, e.clone())?;
        }
        self.installed.insert(p.id, Installation { plan, entries });
        Ok(&self.installed[&p.id])
    }

    /// Removes all entries of `pipeline`; returns how many were removed.
    pub fn teardown(&mut self, fabric: &mut Fabric, pipeline: u64) -> usize {
        match self.installed.remove(&pipeline) {
            Some(_) => fabric.remove_cookie(pipeline),
            None => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::topology::{LinkParams, Role, ThreeLayerShape};

    fn ep(t: &Topology, n: NodeId) -> Endpoint {
        Endpoint { node: n, ip: t.ip(n).unwrap() }
    }

    fn spec(t: &Topology, client: NodeId, nodes: &[u32]) -> PipelineSpec {
        PipelineSpec {
            id: 7,
            client: ep(t, client),
            data_nodes: nodes.iter().map(|&n| ep(t, NodeId(n))).collect(),
            hops: (0..nodes.len()).map(|j| HopPorts { src_port: 40_000 + j as u16, dst_port: 50_010 }).collect(),
        }
    }

    fn small_tree() -> (Topology, PipelineSpec) {
        let mut t = Topology::build_three_layer(ThreeLayerShape::new(1, 2, 1, 3), LinkParams::default()).unwrap();
        let c = t.attach_external(Ipv4Addr::new(192, 0, 2, 1), LinkParams::default());
        let p = spec(&t, c, &[5, 6, 8]);
        (t, p)
    }

    fn toward(t: &Topology, sw: u32, peers: &[u32]) -> BTreeSet<InterfaceId> {
        peers.iter().map(|&p| t.interface_toward(NodeId(sw), NodeId(p)).unwrap()).collect()
    }

    #[test]
    fn small_tree_tree_matches_forwarding_table() {
        let (t, p) = small_tree();
        let plan = compute_tree(&t, &p).unwrap();
        // s_c=0, s_b=1, s_d=2, s_a=3, s_e=4; D1=5, D2=6, D3=8.
        let expected: BTreeMap<NodeId, BTreeSet<InterfaceId>> = [
            (3, toward(&t, 3, &[5, 6])),
            (1, toward(&t, 1, &[3])),
            (0, toward(&t, 0, &[1, 2])),
            (2, toward(&t, 2, &[4])),
            (4, toward(&t, 4, &[8])),
        ]
        .into_iter()
        .map(|(s, f)| (NodeId(s), f))
        .collect();
        let got: BTreeMap<_, _> = plan.switches.iter().map(|(s, sp)| (*s, sp.forwarding.clone())).collect();
        assert_eq!(got, expected);
        for sp in plan.switches.values() {
            assert!(!sp.forwarding.contains(&sp.toward_client));
        }
    }

    #[test]
    fn small_tree_entries_follow_mirroring_layout() {
        let (t, p) = small_tree();
        let plan = compute_tree(&t, &p).unwrap();
        let entries = program_mirroring(&t, &plan, &p);
        let get = |sw: u32| &entries.iter().find(|(s, _)| *s == NodeId(sw)).unwrap().1;
        let (d1, d2) = (p.hop_src(1), p.hop_dst(1));
        assert_eq!(
            get(3).actions,
            vec![
                Action::Output(t.interface_toward(NodeId(3), NodeId(5)).unwrap()),
                Action::SetField(SetField::SrcIp(*d1.ip())),
                Action::SetField(SetField::DstIp(*d2.ip())),
                Action::SetField(SetField::SrcPort(d1.port())),
                Action::SetField(SetField::DstPort(d2.port())),
                Action::SetField(SetField::Reserved(Reserved::Mirrored)),
                Action::Output(t.interface_toward(NodeId(3), NodeId(6)).unwrap()),
            ]
        );
        let (d2s, d3) = (p.hop_src(2), p.hop_dst(2));
        assert_eq!(
            get(4).actions,
            vec![
                Action::SetField(SetField::SrcIp(*d2s.ip())),
                Action::SetField(SetField::DstIp(*d3.ip())),
                Action::SetField(SetField::SrcPort(d2s.port())),
                Action::SetField(SetField::DstPort(d3.port())),
                Action::SetField(SetField::Reserved(Reserved::Mirrored)),
                Action::Output(t.interface_toward(NodeId(4), NodeId(8)).unwrap()),
            ]
        );
        let sc: Vec<_> = get(0).actions.clone();
        let want: Vec<_> = toward(&t, 0, &[1, 2]).into_iter().map(Action::Output).collect();
        assert_eq!(sc, want);
        assert!(entries.iter().all(|(_, e)| e.matches == p.client_match() && e.priority == MIRROR_PRIORITY));
    }

    #[test]
    fn single_node_in_client_rack_uses_only_shared_edge() {
        let t = Topology::build_three_layer(ThreeLayerShape::new(1, 2, 1, 3), LinkParams::default()).unwrap();
        let p = spec(&t, NodeId(7), &[5]);
        let plan = compute_tree(&t, &p).unwrap();
        assert_eq!(plan.switches.len(), 1);
        assert_eq!(plan.forwarding(NodeId(3)).unwrap().len(), 1);
    }

    #[test]
    fn install_and_teardown_are_idempotent() {
        let (t, p) = small_tree();
        let mut fabric = Fabric::new(&t);
        let mut ctl = Controller::new();
        ctl.install(&t, &mut fabric, &p).unwrap();
        ctl.install(&t, &mut fabric, &p).unwrap();
        assert_eq!(fabric.entry_count(), 5);
        assert_eq!(ctl.teardown(&mut fabric, p.id), 5);
        assert_eq!(ctl.teardown(&mut fabric, p.id), 0);
        assert_eq!(fabric.entry_count(), 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let (t, mut p) = small_tree();
        p.data_nodes.push(p.data_nodes[0]);
        p.hops.push(p.hops[0]);
        assert_eq!(compute_tree(&t, &p), Err(ControllerError::Duplicate(NodeId(5))));
        p.data_nodes.pop();
        assert!(matches!(compute_tree(&t, &p), Err(ControllerError::HopMismatch { .. })));
        p.data_nodes.clear();
        p.hops.clear();
        assert_eq!(compute_tree(&t, &p), Err(ControllerError::Empty));
    }

    #[test]
    fn plan_dump_is_stable() {
        let (t, p) = small_tree();
        let plan = compute_tree(&t, &p).unwrap();
        let entries = program_mirroring(&t, &plan, &p);
        let dump = plan_dump(&plan, &entries, &p);
        assert_eq!(dump, plan_dump(&plan, &entries, &p));
        assert!(dump.starts_with("pipeline 7 k=3\nswitch n0 ingress="));
        assert_eq!(dump.lines().filter(|l| l.starts_with("switch")).count(), 5);
    }

    /// Oracle: union the shortest paths from the client and, at each switch,
    /// collect the next-hop interfaces other than the one the path entered on.
    fn path_union_oracle(t: &Topology, p: &PipelineSpec) -> BTreeMap<NodeId, BTreeSet<InterfaceId>> {
        let mut out: BTreeMap<NodeId, BTreeSet<InterfaceId>> = BTreeMap::new();
        for d in &p.data_nodes {
            let nodes = t.path_nodes(p.client.node, d.node).unwrap();
            for w in nodes.windows(2) {
                if t.role(w[0]).unwrap().is_switch() {
                    out.entry(w[0]).or_default().insert(t.interface_toward(w[0], w[1]).unwrap());
                }
            }
            for &n in &nodes {
                if t.role(n).unwrap().is_switch() {
                    out.entry(n).or_default();
                }
            }
        }
        for (sw, set) in out.iter_mut() {
            let back = t.egress_interface(*sw, p.client.node).unwrap();
            set.remove(&back);
        }
        out
    }

    proptest! {
        #[test]
        fn tree_equals_path_union(picks in proptest::sample::subsequence((0u32..16).collect::<Vec<_>>(), 5)) {
            let t = Topology::build_three_layer(ThreeLayerShape::new(2, 2, 2, 2), LinkParams::default()).unwrap();
            let hosts: Vec<NodeId> = t.hosts().map(|n| n.id).collect();
            let mut chosen: Vec<NodeId> = picks.iter().map(|&i| hosts[i as usize % hosts.len()]).collect();
            chosen.dedup();
            prop_assume!(chosen.len() == 5);
            let client = chosen[0];
            let ids: Vec<u32> = chosen[1..].iter().map(|n| n.0).collect();
            let p = spec(&t, client, &ids);
            let plan = compute_tree(&t, &p).unwrap();
            let got: BTreeMap<_, _> = plan.switches.iter().map(|(s, sp)| (*s, sp.forwarding.clone())).collect();
            prop_assert_eq!(got, path_union_oracle(&t, &p));
            // Every data node is reached exactly once by following the tree.
            let mut reached = Vec::new();
            let mut stack = vec![t.interface_toward(client, t.peer(InterfaceId { node: client, port: 0 }).unwrap()).unwrap()];
            while let Some(iface) = stack.pop() {
                let next = t.peer(iface).unwrap();
                match t.role(next).unwrap() {
                    Role::Host => reached.push(next),
                    _ => stack.extend(plan.forwarding(next).unwrap().iter().copied()),
                }
            }
            reached.sort();
            let mut want: Vec<NodeId> = chosen[1..].to_vec();
            want.sort();
            prop_assert_eq!(reached, want);
        }
    }
}
