//! Switch data plane: prioritized flow tables with ordered set-field/output
//! action lists, falling back to destination routing on a table miss.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;

use crate::engine::SimTime;
use crate::topology::{InterfaceId, NodeId, Topology};
use crate::transport::{Reserved, Segment, TCP_PROTOCOL};

/// Simulation-only bookkeeping that travels with a frame but is invisible
/// to switches and endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameMeta {
    /// Host whose transport put the original frame on the wire.
    pub origin: NodeId,
    /// Payload belongs to the replicated block stream.
    pub replication: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub protocol: u8,
    pub segment: Segment,
    pub meta: FrameMeta,
}

impl Frame {
    pub fn tcp(segment: Segment, meta: FrameMeta) -> Self {
        Frame { protocol: TCP_PROTOCOL, segment, meta }
    }

    pub fn wire_len(&self) -> usize {
        self.segment.wire_len()
    }
}

/// Five-tuple match; `None` is a wildcard.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct MatchFields {
    pub src_ip: Option<Ipv4Addr>,
    pub dst_ip: Option<Ipv4Addr>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub protocol: Option<u8>,
}

impl MatchFields {
    pub fn matches(&self, frame: &Frame) -> bool {
        let s = &frame.segment;
        self.src_ip.is_none_or(|v| v == *s.src.ip())
            && self.dst_ip.is_none_or(|v| v == *s.dst.ip())
            && self.src_port.is_none_or(|v| v == s.src.port())
            && self.dst_port.is_none_or(|v| v == s.dst.port())
            && self.protocol.is_none_or(|v| v == frame.protocol)
    }

    pub fn is_wildcard(&self) -> bool {
        *self == MatchFields::default()
    }
}

impl fmt::Display for MatchFields {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn opt<T: fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "*".to_string(), |v| v.to_string())
        }
        write!(
            f,
            "src={}:{} dst={}:{} proto={}",
            opt(&self.src_ip),
            opt(&self.src_port),
            opt(&self.dst_ip),
            opt(&self.dst_port),
            opt(&self.protocol)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SetField {
    SrcIp(Ipv4Addr),
    DstIp(Ipv4Addr),
    SrcPort(u16),
    DstPort(u16),
    Protocol(u8),
    Reserved(Reserved),
}

impl SetField {
    fn apply(&self, frame: &mut Frame) {
        let s = &mut frame.segment;
        match *self {
            SetField::SrcIp(ip) => s.src.set_ip(ip),
            SetField::DstIp(ip) => s.dst.set_ip(ip),
            SetField::SrcPort(p) => s.src.set_port(p),
            SetField::DstPort(p) => s.dst.set_port(p),
            SetField::Protocol(p) => frame.protocol = p,
            SetField::Reserved(r) => s.reserved = r,
        }
    }
}

impl fmt::Display for SetField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SetField::SrcIp(v) => write!(f, "set(src_ip={v})"),
            SetField::DstIp(v) => write!(f, "set(dst_ip={v})"),
            SetField::SrcPort(v) => write!(f, "set(src_port={v})"),
            SetField::DstPort(v) => write!(f, "set(dst_port={v})"),
            SetField::Protocol(v) => write!(f, "set(proto={v})"),
            SetField::Reserved(v) => write!(f, "set(reserved={})", v.bits()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    SetField(SetField),
    Output(InterfaceId),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::SetField(s) => s.fmt(f),
            Action::Output(i) => write!(f, "output({i})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowEntry {
    pub priority: u16,
    pub matches: MatchFields,
    pub actions: Vec<Action>,
    /// Owner tag used for bulk removal.
    pub cookie: u64,
}

impl fmt::Display for FlowEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "prio={} cookie={} match[{}] actions[", self.priority, self.cookie, self.matches)?;
        for (i, a) in self.actions.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            a.fmt(f)?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FabricError {
    #[error("{0} is not a switch")]
    UnknownSwitch(NodeId),
    #[error("entry with an all-wildcard match rejected")]
    WildcardEntry,
}

/// Result of an install request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstallAck {
    pub entry_id: u64,
    /// False when an identical entry was already present.
    pub added: bool,
}

#[derive(Debug, Clone, Default)]
pub struct FlowTable {
    /// In installation order.
    entries: Vec<(u64, FlowEntry)>,
    next_id: u64,
}

impl FlowTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &FlowEntry)> {
        self.entries.iter().map(|(id, e)| (*id, e))
    }

    pub fn install(&mut self, entry: FlowEntry) -> InstallAck {
        if let Some((id, _)) = self.entries.iter().find(|(_, e)| *e == entry) {
            return InstallAck { entry_id: *id, added: false };
        }
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push((id, entry));
        InstallAck { entry_id: id, added: true }
    }

    pub fn remove_cookie(&mut self, cookie: u64) -> usize {
        let before = self.entries.len();
        self.entries.retain(|(_, e)| e.cookie != cookie);
        before - self.entries.len()
    }

    /// Highest priority wins; among equals the earliest installed.
    pub fn lookup(&self, frame: &Frame) -> Option<(u64, &FlowEntry)> {
        let mut best: Option<&(u64, FlowEntry)> = None;
        for item in &self.entries {
            if item.1.matches.matches(frame) && best.is_none_or(|b| item.1.priority > b.1.priority) {
                best = Some(item);
            }
        }
        best.map(|(id, e)| (*id, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Entry(u64),
    Miss,
    /// No route (unknown destination or addressed to the switch).
    Dropped,
}

#[derive(Debug, Clone)]
pub struct Forwarding {
    pub decision: Decision,
    pub outputs: Vec<(InterfaceId, Frame)>,
}

impl Forwarding {
    pub fn trace_line(&self, now: SimTime, sw: NodeId, in_if: InterfaceId) -> String {
        let decision = match self.decision {
            Decision::Entry(id) => format!("entry#{id}"),
            Decision::Miss => "miss".to_string(),
            Decision::Dropped => "drop".to_string(),
        };
        let outs: Vec<String> = self.outputs.iter().map(|(i, _)| i.to_string()).collect();
        format!("{now} switch {sw} {decision} in={in_if} out=[{}]", outs.join(","))
    }
}

/// The flow tables of every switch in a topology.
#[derive(Debug, Clone, Default)]
pub struct Fabric {
    tables: BTreeMap<NodeId, FlowTable>,
}

impl Fabric {
    pub fn new(topo: &Topology) -> Self {
        let tables = topo.switches().map(|n| (n.id, FlowTable::default())).collect();
        Fabric { tables }
    }

    pub fn table(&self, sw: NodeId) -> Option<&FlowTable> {
        self.tables.get(&sw)
    }

    pub fn entry_count(&self) -> usize {
        self.tables.values().map(FlowTable::len).sum()
    }

    pub fn install_entry(&mut self, sw: NodeId, entry: FlowEntry) -> Result<InstallAck, FabricError> {
        if entry.matches.is_wildcard() {
            return Err(FabricError::WildcardEntry);
        }
        let table = self.tables.get_mut(&sw).ok_or(FabricError::UnknownSwitch(sw))?;
        Ok(table.install(entry))
    }

    pub fn remove_cookie(&mut self, cookie: u64) -> usize {
        self.tables.values_mut().map(|t| t.remove_cookie(cookie)).sum()
    }

    /// Applies the matching entry's action list, or routes by destination on
    /// a miss. Never emits a copy back out of `in_if`.
    pub fn process_frame(&self, topo: &Topology, sw: NodeId, in_if: InterfaceId, frame: Frame) -> Forwarding {
        let table = match self.tables.get(&sw) {
            Some(t) => t,
            None => return Forwarding { decision: Decision::Dropped, outputs: Vec::new() },
        };
        if let Some((id, entry)) = table.lookup(&frame) {
            let mut current = frame;
            let mut outputs = Vec::new();
            for action in &entry.actions {
                match action {
                    Action::SetField(s) => s.apply(&mut current),
                    Action::Output(out) if *out != in_if => outputs.push((*out, current.clone())),
                    Action::Output(_) => {}
                }
            }
            return Forwarding { decision: Decision::Entry(id), outputs };
        }
        let dst = topo.node_by_ip(*frame.segment.dst.ip());
        match dst.map(|d| topo.egress_interface(sw, d)) {
            Some(Ok(out)) if out != in_if => Forwarding { decision: Decision::Miss, outputs: vec![(out, frame)] },
            _ => Forwarding { decision: Decision::Dropped, outputs: Vec::new() },
        }
    }
}
