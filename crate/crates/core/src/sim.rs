//! The simulated cluster: hosts with transport stacks and applications,
//! switches driven by the fabric, and the Name Node / controller control
//! plane, all on one event timeline.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use bytes::Bytes;

use crate::controller::{Controller, ControllerError, Endpoint, HopPorts, PipelineSpec};
use crate::engine::{derive_seed, ChannelCounters, Direction, EngineError, EventQueue, LinkChannel, SimTime, Transmission};
use crate::fabric::{Fabric, Frame, FrameMeta};
use crate::replication::{
    name_node_allocate, validate_placement, Actor, AppNote, AppTimer, Block, ClientApp, ControlMsg, DataNodeApp,
    Mode, NodeConfig, Outbox, ReplicationError, DATA_NODE_PORT,
};
use crate::topology::{InterfaceId, LinkId, LinkParams, NodeId, Role, ThreeLayerShape, Topology, TopologyError};
use crate::transport::{ConnEvent, ConnId, ConnStats, Effects, Emitted, Reserved, Stack, TcpState, TransportConfig, TxReason};

/// Address given to a client outside the data center.
pub const EXTERNAL_CLIENT_IP: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPlacement {
    /// Outside the data center, attached to core switch 0.
    Outside,
    /// On the given host.
    Host(NodeId),
}

/// Drops the `nth` (0-based) payload-bearing frame with the given reserved
/// value on the final link into host `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropRule {
    pub to: NodeId,
    pub reserved: Reserved,
    pub nth: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub shape: ThreeLayerShape,
    pub link: LinkParams,
    /// Per-link, per-direction Bernoulli drop probability.
    pub loss: f64,
    pub seed: u64,
    pub mode: Mode,
    pub k: usize,
    pub block_id: u64,
    pub block_size: usize,
    pub packet_size: usize,
    pub write_max_packets: usize,
    pub persist_delay: SimTime,
    pub forward_delay: SimTime,
    pub transport: TransportConfig,
    /// Host CPU time to send or receive one segment.
    pub seg_proc: SimTime,
    /// One-way latency of control-plane messages.
    pub control_delay: SimTime,
    /// Time for the controller to install a pipeline's entries.
    pub install_delay: SimTime,
    pub client: ClientPlacement,
    /// Explicit D_1..D_k; the Name Node policy is used when absent.
    pub placement: Option<Vec<NodeId>>,
    pub trace: bool,
    /// Simulated-time limit.
    pub max_time: SimTime,
    pub drop_rules: Vec<DropRule>,
    /// Removes the mirroring entries at this time.
    pub teardown_at: Option<SimTime>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let packet_size = crate::replication::DEFAULT_PACKET_SIZE;
        let write_max_packets = crate::replication::DEFAULT_WRITE_MAX_PACKETS;
        SimConfig {
            shape: ThreeLayerShape::new(1, 2, 2, 4),
            link: LinkParams::default(),
            loss: 0.0,
            seed: 1,
            mode: Mode::Mirrored,
            k: 3,
            block_id: 1,
            block_size: 4 << 20,
            packet_size,
            write_max_packets,
            persist_delay: SimTime::ZERO,
            forward_delay: SimTime::ZERO,
            transport: TransportConfig { rcv_buffer: (write_max_packets * packet_size) as u64, ..TransportConfig::default() },
            seg_proc: SimTime::from_micros(5),
            control_delay: SimTime::from_micros(50),
            install_delay: SimTime::ZERO,
            client: ClientPlacement::Outside,
            placement: None,
            trace: false,
            max_time: SimTime::from_millis(600_000),
            drop_rules: Vec::new(),
            teardown_at: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("controller: {0}")]
    Controller(#[from] ControllerError),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("placement: {0}")]
    Placement(ReplicationError),
    #[error("application at {node} failed at {at} ns: {source}")]
    App { node: NodeId, at: SimTime, source: ReplicationError },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("block incomplete at {at} ns: {acked}/{total} packets acknowledged")]
    Incomplete { at: SimTime, acked: usize, total: usize },
}

/// Delivered traffic on one direction of one link.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkReport {
    pub link: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    /// Traversal toward the core.
    pub ascending: bool,
    pub external: bool,
    pub channel: ChannelCounters,
    pub payload_bytes: u64,
    /// Wire bytes of frames without payload (ACKs and handshakes).
    pub control_bytes: u64,
    /// Replicated block bytes keyed by the originating host.
    pub replication_by_origin: BTreeMap<NodeId, u64>,
}

impl LinkReport {
    pub fn replication_bytes(&self) -> u64 {
        self.replication_by_origin.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TxKey {
    pub src: NodeId,
    pub dst: Ipv4Addr,
    pub reason: TxReason,
    pub reserved: Reserved,
    pub replication: bool,
    pub has_payload: bool,
    pub ack_flag: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TxCount {
    pub segments: u64,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnSnapshot {
    pub node: NodeId,
    pub local: SocketAddrV4,
    pub remote: SocketAddrV4,
    pub state: TcpState,
    pub snd_una: u64,
    pub snd_nxt: u64,
    pub write_end: u64,
    pub pending_early_acks: usize,
    pub delta: Option<i64>,
    pub stats: ConnStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncRecord {
    pub node: NodeId,
    pub at: SimTime,
    pub n_1: u64,
    pub n_j: u64,
    pub delta: i64,
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub mode: Mode,
    pub k: usize,
    pub seed: u64,
    pub client: NodeId,
    pub data_nodes: Vec<NodeId>,
    /// Setup finished at the client; data transfer starts here.
    pub setup_time: SimTime,
    pub data_time: SimTime,
    pub total_time: SimTime,
    pub links: Vec<LinkReport>,
    pub tx: BTreeMap<TxKey, TxCount>,
    pub transport: BTreeMap<NodeId, ConnStats>,
    pub connections: Vec<ConnSnapshot>,
    pub syncs: Vec<SyncRecord>,
    /// Data nodes that saw mirrored data before their sync point.
    pub fallbacks: Vec<NodeId>,
    pub block: Bytes,
    pub replicas: Vec<(NodeId, Vec<u8>)>,
    pub packets: usize,
    pub client_ack_times: Vec<SimTime>,
    pub persist_times: BTreeMap<NodeId, BTreeMap<u32, SimTime>>,
    pub max_outstanding: usize,
    pub misdelivered: u64,
    pub events: u64,
    pub plan_dump: Option<String>,
    pub trace: Vec<String>,
}

impl RunMetrics {
    /// Replicated payload bytes summed over in-DC link traversals.
    pub fn payload_link_traversals(&self) -> u64 {
        self.links.iter().filter(|l| !l.external).map(LinkReport::replication_bytes).sum()
    }

    /// Delivered wire bytes of payload-free frames on in-DC links.
    pub fn ack_bytes(&self) -> u64 {
        self.links.iter().filter(|l| !l.external).map(|l| l.control_bytes).sum()
    }

    pub fn retransmitted_segments(&self) -> u64 {
        self.transport.values().map(|s| s.retransmitted_segments).sum()
    }

    pub fn early_acks_stored(&self) -> u64 {
        self.transport.values().map(|s| s.early_acks_stored).sum()
    }

    pub fn ooo_dropped(&self) -> u64 {
        self.transport.values().map(|s| s.ooo_dropped).sum()
    }

    /// In-DC links carrying replicated bytes that originated at `origin`.
    pub fn replication_links_from(&self, origin: NodeId) -> Vec<&LinkReport> {
        self.links
            .iter()
            .filter(|l| !l.external && l.replication_by_origin.get(&origin).copied().unwrap_or(0) > 0)
            .collect()
    }

    /// Replicated bytes originated at `origin`, summed over in-DC links.
    pub fn replication_bytes_from(&self, origin: NodeId) -> u64 {
        self.links.iter().filter(|l| !l.external).filter_map(|l| l.replication_by_origin.get(&origin)).sum()
    }

    /// Aggregated transmissions matching a predicate.
    pub fn tx_where(&self, pred: impl Fn(&TxKey) -> bool) -> TxCount {
        let mut t = TxCount::default();
        for (k, c) in &self.tx {
            if pred(k) {
                t.segments += c.segments;
                t.payload_bytes += c.payload_bytes;
            }
        }
        t
    }

    pub fn replicas_match_source(&self) -> bool {
        self.replicas.len() == self.k && self.replicas.iter().all(|(_, r)| r[..] == self.block[..])
    }
}

enum App {
    Idle,
    Client(ClientApp),
    DataNode(DataNodeApp),
}

struct Host {
    stack: Stack,
    cpu_free: SimTime,
    app: App,
}

enum Ev {
    Arrive { node: NodeId, in_if: InterfaceId, frame: Frame },
    HostRx { node: NodeId, frame: Frame },
    HostTx { node: NodeId, frame: Frame },
    Rto { node: NodeId, conn: ConnId },
    App { node: NodeId, timer: AppTimer },
    Control { to: Actor, msg: ControlMsg },
    Install(PipelineSpec),
    Teardown,
}

#[derive(Default)]
struct NameNode {
    hops: BTreeMap<usize, (SocketAddrV4, SocketAddrV4)>,
    ready: bool,
    notified: bool,
}

const PIPELINE_ID: u64 = 1;

struct World {
    cfg: SimConfig,
    topo: Topology,
    fabric: Fabric,
    controller: Controller,
    queue: EventQueue<Ev>,
    hosts: BTreeMap<NodeId, Host>,
    channels: Vec<[LinkChannel; 2]>,
    client: NodeId,
    data_nodes: Vec<NodeId>,
    name_node: NameNode,
    drop_counters: Vec<u64>,
    reports: Vec<[LinkReport; 2]>,
    tx: BTreeMap<TxKey, TxCount>,
    syncs: Vec<SyncRecord>,
    fallbacks: Vec<NodeId>,
    client_ack_times: Vec<SimTime>,
    persist_times: BTreeMap<NodeId, BTreeMap<u32, SimTime>>,
    misdelivered: u64,
    events: u64,
    plan_dump: Option<String>,
    trace: Vec<String>,
    failure: Option<SimError>,
}

fn trace_event(e: &ConnEvent) -> String {
    match e {
        ConnEvent::EnteredMrRcv(r, d) => format!("enter MR_RCV n_1={} n_j={} delta={d}", r.n_1, r.n_j),
        ConnEvent::EnteredMrSnd => "enter MR_SND".to_string(),
        ConnEvent::VirtualTransmit(r) => format!("virtual_tx {}..{}", r.start, r.end),
        other => format!("{other:?}"),
    }
}

impl World {
    fn build(cfg: &SimConfig) -> Result<World, SimError> {
        if cfg.k == 0 || cfg.block_size == 0 || cfg.packet_size == 0 || cfg.write_max_packets == 0 {
            return Err(SimError::Config("k, block size, packet size and writeMaxPackets must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.loss) {
            return Err(SimError::Config(format!("loss {} outside [0, 1)", cfg.loss)));
        }
        let mut topo = Topology::build_three_layer(cfg.shape, cfg.link)?;
        let client = match cfg.client {
            ClientPlacement::Outside => topo.attach_external(EXTERNAL_CLIENT_IP, cfg.link),
            ClientPlacement::Host(n) => {
                if topo.role(n) != Some(Role::Host) {
                    return Err(SimError::Config(format!("client {n} is not a host")));
                }
                n
            }
        };
        let data_nodes = match &cfg.placement {
            Some(p) => {
                validate_placement(&topo, client, p).map_err(SimError::Placement)?;
                if p.len() != cfg.k {
                    return Err(SimError::Config(format!("placement lists {} nodes but k = {}", p.len(), cfg.k)));
                }
                p.clone()
            }
            None => name_node_allocate(&topo, client, cfg.block_id, cfg.k, cfg.seed).map_err(SimError::Placement)?,
        };
        let tcfg = TransportConfig { mr_enabled: cfg.mode == Mode::Mirrored, ..cfg.transport };
        let ncfg = NodeConfig {
            mode: cfg.mode,
            packet_size: cfg.packet_size,
            write_max_packets: cfg.write_max_packets,
            persist_delay: cfg.persist_delay,
            forward_delay: cfg.forward_delay,
        };
        let block = Block::generate(cfg.block_id, cfg.block_size, cfg.seed);
        let mut hosts = BTreeMap::new();
        for n in topo.nodes().iter().filter(|n| n.role.is_endpoint()) {
            let mut stack = Stack::new(n.ip.expect("endpoints have addresses"), tcfg, derive_seed(cfg.seed, &[0x57AC, n.id.0 as u64]));
            let app = if n.id == client {
                App::Client(ClientApp::new(ncfg, block.clone(), cfg.k))
            } else if data_nodes.contains(&n.id) {
                stack.listen(DATA_NODE_PORT);
                App::DataNode(DataNodeApp::new(ncfg))
            } else {
                App::Idle
            };
            hosts.insert(n.id, Host { stack, cpu_free: SimTime::ZERO, app });
        }
        let mut channels = Vec::new();
        let mut reports = Vec::new();
        for l in topo.links() {
            let ch = |d: Direction| {
                LinkChannel::new(l.params.bandwidth, l.params.delay, cfg.loss, derive_seed(cfg.seed, &[0x11E, l.id.0 as u64, d.index() as u64]))
            };
            channels.push([ch(Direction::AtoB), ch(Direction::BtoA)]);
            let rep = |from: NodeId, to: NodeId, ascending: bool| LinkReport {
                link: l.id,
                from,
                to,
                ascending,
                external: l.external,
                ..LinkReport::default()
            };
            reports.push([rep(l.a.node, l.b.node, false), rep(l.b.node, l.a.node, true)]);
        }
        Ok(World {
            fabric: Fabric::new(&topo),
            topo,
            controller: Controller::new(),
            queue: EventQueue::new(),
            hosts,
            channels,
            client,
            data_nodes,
            name_node: NameNode::default(),
            drop_counters: vec![0; cfg.drop_rules.len()],
            reports,
            tx: BTreeMap::new(),
            syncs: Vec::new(),
            fallbacks: Vec::new(),
            client_ack_times: Vec::new(),
            persist_times: BTreeMap::new(),
            misdelivered: 0,
            events: 0,
            plan_dump: None,
            trace: Vec::new(),
            failure: None,
            cfg: cfg.clone(),
        })
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if self.cfg.trace {
            self.trace.push(line());
        }
    }

    fn at(&mut self, t: SimTime, ev: Ev) {
        self.queue.schedule(t, ev).expect("handlers never schedule into the past");
    }

    fn run(mut self) -> Result<RunMetrics, SimError> {
        let now = SimTime::ZERO;
        let mut out = Outbox::default();
        if let Some(App::Client(c)) = self.hosts.get_mut(&self.client).map(|h| &mut h.app) {
            c.start(self.client, &mut out);
        }
        self.process_outbox(self.client, out, now);
        if let (Some(t), Mode::Mirrored) = (self.cfg.teardown_at, self.cfg.mode) {
            self.at(t, Ev::Teardown);
        }
        while let Some((now, ev)) = self.queue.pop() {
            if now > self.cfg.max_time {
                break;
            }
            self.events += 1;
            self.handle(now, ev);
            if let Some(err) = self.failure.take() {
                return Err(err);
            }
        }
        self.finish()
    }

    fn handle(&mut self, now: SimTime, ev: Ev) {
        match ev {
            Ev::Arrive { node, in_if, frame } => {
                if self.topo.role(node).is_some_and(|r| r.is_switch()) {
                    let fw = self.fabric.process_frame(&self.topo, node, in_if, frame);
                    self.log(|| fw.trace_line(now, node, in_if));
                    for (out, f) in fw.outputs {
                        self.transmit(out, f, now);
                    }
                } else {
                    let done = self.cpu(node, now);
                    self.at(done, Ev::HostRx { node, frame });
                }
            }
            Ev::HostRx { node, frame } => self.host_rx(node, frame, now),
            Ev::HostTx { node, frame } => self.transmit(InterfaceId { node, port: 0 }, frame, now),
            Ev::Rto { node, conn } => {
                let host = self.hosts.get_mut(&node).expect("timer host exists");
                match host.stack.on_timer(conn, now) {
                    Ok(eff) => self.apply_effects(node, conn, eff, now),
                    Err(e) => self.fail(node, now, e.into()),
                }
            }
            Ev::App { node, timer } => {
                let mut out = Outbox::default();
                let host = self.hosts.get_mut(&node).expect("timer host exists");
                let res = match &mut host.app {
                    App::DataNode(d) => d.on_timer(&mut host.stack, timer, now, &mut out),
                    _ => Ok(()),
                };
                match res {
                    Ok(()) => self.process_outbox(node, out, now),
                    Err(e) => self.fail(node, now, e),
                }
            }
            Ev::Control { to, msg } => self.on_control(to, msg, now),
            Ev::Install(spec) => match self.controller.install(&self.topo, &mut self.fabric, &spec) {
                Ok(inst) => {
                    let dump = crate::controller::plan_dump(&inst.plan, &inst.entries, &spec);
                    let n = inst.entries.len();
                    self.plan_dump = Some(dump);
                    self.log(|| format!("{now} controller installed {n} entries"));
                    let d1 = spec.data_nodes[0].node;
                    self.at(now + self.cfg.control_delay, Ev::Control { to: Actor::Host(d1), msg: ControlMsg::MirroringInstalled });
                }
                Err(e) => self.failure = Some(e.into()),
            },
            Ev::Teardown => {
                let n = self.controller.teardown(&mut self.fabric, PIPELINE_ID);
                self.log(|| format!("{now} controller removed {n} entries"));
            }
        }
    }

    fn fail(&mut self, node: NodeId, at: SimTime, source: ReplicationError) {
        if self.failure.is_none() {
            self.failure = Some(SimError::App { node, at, source });
        }
    }

    /// Reserves one segment's worth of host CPU; returns its completion time.
    fn cpu(&mut self, node: NodeId, now: SimTime) -> SimTime {
        let host = self.hosts.get_mut(&node).expect("endpoint host");
        let start = host.cpu_free.max(now);
        host.cpu_free = start + self.cfg.seg_proc;
        host.cpu_free
    }

    fn transmit(&mut self, iface: InterfaceId, frame: Frame, now: SimTime) {
        let link = self.topo.link_at(iface).expect("interface has a link");
        let (lid, dir) = (link.id, link.direction_from(iface.node).expect("link touches node"));
        let peer = link.other_end(iface.node).expect("link touches node");
        let mut force = false;
        if !frame.segment.is_empty() {
            for (i, rule) in self.cfg.drop_rules.iter().enumerate() {
                if rule.to == peer.node && rule.reserved == frame.segment.reserved {
                    if self.drop_counters[i] == rule.nth {
                        force = true;
                    }
                    self.drop_counters[i] += 1;
                }
            }
        }
        let wire = frame.wire_len();
        match self.channels[lid.0 as usize][dir.index()].transmit(now, wire, force) {
            Transmission::Arrives(t) => {
                let rep = &mut self.reports[lid.0 as usize][dir.index()];
                let payload = frame.segment.len() as u64;
                if payload == 0 {
                    rep.control_bytes += wire as u64;
                } else {
                    rep.payload_bytes += payload;
                    if frame.meta.replication {
                        *rep.replication_by_origin.entry(frame.meta.origin).or_default() += payload;
                    }
                }
                self.at(t, Ev::Arrive { node: peer.node, in_if: peer, frame });
            }
            Transmission::Dropped => {
                self.log(|| format!("{now} drop {lid} {:?} {}", dir, frame.segment));
            }
        }
    }

    fn host_rx(&mut self, node: NodeId, frame: Frame, now: SimTime) {
        let host = self.hosts.get_mut(&node).expect("endpoint host");
        if *frame.segment.dst.ip() != host.stack.ip() {
            self.misdelivered += 1;
            return;
        }
        if self.cfg.trace {
            self.trace.push(format!("{now} host {node} rx {}", frame.segment));
        }
        let Some(delivery) = host.stack.on_segment(frame.segment, now) else { return };
        if delivery.accepted {
            if let App::DataNode(d) = &mut host.app {
                d.on_accept(delivery.conn);
            }
        }
        self.apply_effects(node, delivery.conn, delivery.effects, now);
    }

    fn apply_effects(&mut self, node: NodeId, conn: ConnId, eff: Effects, now: SimTime) {
        for e in &eff.events {
            match e {
                ConnEvent::EnteredMrRcv(r, delta) => {
                    self.syncs.push(SyncRecord { node, at: now, n_1: r.n_1, n_j: r.n_j, delta: *delta })
                }
                ConnEvent::MirrorUnsynced => self.fallbacks.push(node),
                _ => {}
            }
            if self.cfg.trace {
                let c = self.hosts[&node].stack.connection(conn).expect("live connection");
                let line = format!("{now} conn {node} {}->{} {}", c.local(), c.remote(), trace_event(e));
                self.trace.push(line);
            }
        }
        for em in eff.emitted {
            self.send(node, em, now);
        }
        if let Some(at) = eff.timer {
            self.at(at, Ev::Rto { node, conn });
        }
        for chunk in eff.delivered {
            let mut out = Outbox::default();
            let host = self.hosts.get_mut(&node).expect("endpoint host");
            let res = match &mut host.app {
                App::Client(c) => c.on_data(&mut host.stack, conn, &chunk, now, &mut out),
                App::DataNode(d) => d.on_data(&mut host.stack, conn, &chunk, now, &mut out),
                App::Idle => Ok(()),
            };
            match res {
                Ok(()) => self.process_outbox(node, out, now),
                Err(e) => return self.fail(node, now, e),
            }
        }
    }

    fn send(&mut self, node: NodeId, em: Emitted, now: SimTime) {
        let seg = &em.segment;
        let key = TxKey {
            src: node,
            dst: *seg.dst.ip(),
            reason: em.reason,
            reserved: seg.reserved,
            replication: em.replication,
            has_payload: !seg.is_empty(),
            ack_flag: seg.flags.contains(crate::transport::Flags::ACK),
        };
        let c = self.tx.entry(key).or_default();
        c.segments += 1;
        c.payload_bytes += seg.len() as u64;
        if self.cfg.trace {
            self.trace.push(format!("{now} host {node} tx {} {:?}", seg, em.reason));
        }
        let done = self.cpu(node, now);
        let frame = Frame::tcp(em.segment, FrameMeta { origin: node, replication: em.replication });
        self.at(done, Ev::HostTx { node, frame });
    }

    fn process_outbox(&mut self, node: NodeId, out: Outbox, now: SimTime) {
        for note in out.notes {
            match note {
                AppNote::PacketPersisted(s) => {
                    self.persist_times.entry(node).or_default().insert(s, now);
                }
                AppNote::PacketAcked { .. } => self.client_ack_times.push(now),
                AppNote::SetupComplete => self.log(|| format!("{now} app {node} setup complete")),
                AppNote::BlockComplete => self.log(|| format!("{now} app {node} block complete")),
                AppNote::PacketSent { .. } => {}
            }
        }
        for (conn, eff) in out.effects {
            self.apply_effects(node, conn, eff, now);
            if self.failure.is_some() {
                return;
            }
        }
        for (to, msg) in out.control {
            self.send_control(to, msg, now);
        }
        for (delay, timer) in out.timers {
            self.at(now + delay, Ev::App { node, timer });
        }
    }

    fn send_control(&mut self, to: Actor, msg: ControlMsg, now: SimTime) {
        self.log(|| format!("{now} ctl -> {to:?} {}", msg.name()));
        self.at(now + self.cfg.control_delay, Ev::Control { to, msg });
    }

    fn pipeline_spec(&self) -> PipelineSpec {
        let ep = |n: NodeId| Endpoint { node: n, ip: self.topo.ip(n).expect("endpoint ip") };
        PipelineSpec {
            id: PIPELINE_ID,
            client: ep(self.client),
            data_nodes: self.data_nodes.iter().map(|&n| ep(n)).collect(),
            hops: self
                .name_node
                .hops
                .values()
                .map(|(s, d)| HopPorts { src_port: s.port(), dst_port: d.port() })
                .collect(),
        }
    }

    fn on_control(&mut self, to: Actor, msg: ControlMsg, now: SimTime) {
        match to {
            Actor::NameNode => match msg {
                ControlMsg::AllocateRequest { client, .. } => {
                    let targets = self
                        .data_nodes
                        .iter()
                        .map(|&n| SocketAddrV4::new(self.topo.ip(n).expect("host ip"), DATA_NODE_PORT))
                        .collect();
                    self.send_control(Actor::Host(client), ControlMsg::AllocateReply { targets }, now);
                }
                ControlMsg::HopEstablished { hop, src, dst } => {
                    self.name_node.hops.insert(hop, (src, dst));
                    self.maybe_notify(now);
                }
                ControlMsg::PipelineReady => {
                    self.name_node.ready = true;
                    self.maybe_notify(now);
                }
                ControlMsg::BlockComplete => {
                    if self.cfg.mode == Mode::Mirrored && self.name_node.notified {
                        self.at(now + self.cfg.control_delay, Ev::Teardown);
                    }
                }
                other => self.failure = Some(SimError::Config(format!("name node cannot handle {}", other.name()))),
            },
            Actor::Controller => match msg {
                ControlMsg::NotifyController(spec) => self.at(now + self.cfg.install_delay, Ev::Install(spec)),
                other => self.failure = Some(SimError::Config(format!("controller cannot handle {}", other.name()))),
            },
            Actor::Host(node) => {
                let mut out = Outbox::default();
                let host = self.hosts.get_mut(&node).expect("control target exists");
                let res = match &mut host.app {
                    App::Client(c) => c.on_control(&mut host.stack, msg, now, &mut out),
                    App::DataNode(d) => d.on_control(&mut host.stack, msg, now, &mut out),
                    App::Idle => Ok(()),
                };
                match res {
                    Ok(()) => self.process_outbox(node, out, now),
                    Err(e) => self.fail(node, now, e),
                }
            }
        }
    }

    fn maybe_notify(&mut self, now: SimTime) {
        let nn = &self.name_node;
        if nn.notified || !nn.ready || nn.hops.len() != self.data_nodes.len() {
            return;
        }
        self.name_node.notified = true;
        let spec = self.pipeline_spec();
        self.send_control(Actor::Controller, ControlMsg::NotifyController(spec), now);
    }

    fn finish(self) -> Result<RunMetrics, SimError> {
        let now = self.queue.now();
        let App::Client(client) = &self.hosts[&self.client].app else { unreachable!("client host runs the client app") };
        let packets = client.block().packet_count(self.cfg.packet_size);
        let (Some(setup), Some(done)) = (client.setup_done_at(), client.complete_at()) else {
            return Err(SimError::Incomplete { at: now, acked: client.acked_packets(), total: packets });
        };
        let block = client.block().content.clone();
        let max_outstanding = client.max_outstanding();
        let mut replicas = Vec::new();
        for &d in &self.data_nodes {
            if let App::DataNode(app) = &self.hosts[&d].app {
                replicas.push((d, app.replica().to_vec()));
            }
        }
        let mut transport = BTreeMap::new();
        let mut connections = Vec::new();
        for (&node, host) in &self.hosts {
            transport.insert(node, host.stack.totals());
            for (_, c) in host.stack.connections() {
                connections.push(ConnSnapshot {
                    node,
                    local: c.local(),
                    remote: c.remote(),
                    state: c.state(),
                    snd_una: c.snd_una(),
                    snd_nxt: c.snd_nxt(),
                    write_end: c.write_end(),
                    pending_early_acks: c.early_acks().len(),
                    delta: c.delta(),
                    stats: *c.stats(),
                });
            }
        }
        let mut links = Vec::new();
        for (i, mut pair) in self.reports.into_iter().enumerate() {
            for (d, rep) in pair.iter_mut().enumerate() {
                rep.channel = self.channels[i][d].counters();
            }
            links.extend(pair);
        }
        Ok(RunMetrics {
            mode: self.cfg.mode,
            k: self.cfg.k,
            seed: self.cfg.seed,
            client: self.client,
            data_nodes: self.data_nodes,
            setup_time: setup,
            data_time: done - setup,
            total_time: done,
            links,
            tx: self.tx,
            transport,
            connections,
            syncs: self.syncs,
            fallbacks: self.fallbacks,
            block,
            replicas,
            packets,
            client_ack_times: self.client_ack_times,
            persist_times: self.persist_times,
            max_outstanding,
            misdelivered: self.misdelivered,
            events: self.events,
            plan_dump: self.plan_dump,
            trace: self.trace,
        })
    }
}

/// Builds the cluster described by `cfg` and writes one block.
pub fn run(cfg: &SimConfig) -> Result<RunMetrics, SimError> {
    World::build(cfg)?.run()
}

/// The topology a configuration would build, with the client attached.
pub fn topology_for(cfg: &SimConfig) -> Result<(Topology, NodeId), SimError> {
    let mut topo = Topology::build_three_layer(cfg.shape, cfg.link)?;
    let client = match cfg.client {
        ClientPlacement::Outside => topo.attach_external(EXTERNAL_CLIENT_IP, cfg.link),
        ClientPlacement::Host(n) => n,
    };
    Ok((topo, client))
}
