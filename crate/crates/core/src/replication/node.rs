use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddrV4;

use bytes::Bytes;

use super::{Actor, AppNote, AppTimer, Block, ControlMsg, Decoder, Message, Mode, Outbox, ReplicationError};
use crate::engine::SimTime;
use crate::topology::NodeId;
use crate::transport::{ConnId, Stack};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeConfig {
    pub mode: Mode,
    pub packet_size: usize,
    pub write_max_packets: usize,
    /// Delay from full packet reception to local persistence.
    pub persist_delay: SimTime,
    /// Delay from full packet reception to forwarding downstream.
    pub forward_delay: SimTime,
}

fn write(stack: &mut Stack, conn: ConnId, data: &[u8], now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
    let eff = stack.write(conn, data, now)?;
    out.effects.push((conn, eff));
    Ok(())
}

fn open(stack: &mut Stack, remote: SocketAddrV4, now: SimTime, out: &mut Outbox) -> ConnId {
    let (conn, eff) = stack.connect(remote, now);
    out.effects.push((conn, eff));
    conn
}

/// Writes one block into a pipeline, keeping at most `write_max_packets`
/// packets unacknowledged.
#[derive(Debug)]
pub struct ClientApp {
    cfg: NodeConfig,
    block: Block,
    k: usize,
    conn: Option<ConnId>,
    decoder: Decoder,
    packets: Vec<Bytes>,
    next_packet: usize,
    acked: usize,
    max_outstanding: usize,
    setup_done_at: Option<SimTime>,
    complete_at: Option<SimTime>,
}

impl ClientApp {
    pub fn new(cfg: NodeConfig, block: Block, k: usize) -> Self {
        let packets = block.packets(cfg.packet_size).map(|m| m.encode()).collect();
        ClientApp {
            cfg,
            block,
            k,
            conn: None,
            decoder: Decoder::default(),
            packets,
            next_packet: 0,
            acked: 0,
            max_outstanding: 0,
            setup_done_at: None,
            complete_at: None,
        }
    }

    pub fn block(&self) -> &Block {
        &self.block
    }

    pub fn conn(&self) -> Option<ConnId> {
        self.conn
    }

    pub fn setup_done_at(&self) -> Option<SimTime> {
        self.setup_done_at
    }

    pub fn complete_at(&self) -> Option<SimTime> {
        self.complete_at
    }

    pub fn max_outstanding(&self) -> usize {
        self.max_outstanding
    }

    pub fn acked_packets(&self) -> usize {
        self.acked
    }

    fn outstanding(&self) -> usize {
        self.next_packet - self.acked
    }

    pub fn start(&mut self, me: NodeId, out: &mut Outbox) {
        out.control.push((Actor::NameNode, ControlMsg::AllocateRequest { client: me, block_id: self.block.id, k: self.k }));
    }

    pub fn on_control(&mut self, stack: &mut Stack, msg: ControlMsg, now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        match msg {
            ControlMsg::AllocateReply { targets } => {
                let conn = open(stack, targets[0], now, out);
                self.conn = Some(conn);
                let setup = Message::WriteBlock {
                    block_id: self.block.id,
                    block_size: self.block.size() as u64,
                    stage: 1,
                    targets: targets[1..].to_vec(),
                };
                write(stack, conn, &setup.encode(), now, out)?;
                stack.connection_mut(conn)?.mark_replication_start();
                Ok(())
            }
            _ => Err(ReplicationError::Unexpected(msg.name())),
        }
    }

    pub fn on_data(&mut self, stack: &mut Stack, conn: ConnId, data: &[u8], now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        if Some(conn) != self.conn {
            return Err(ReplicationError::Unexpected("data on unknown connection"));
        }
        self.decoder.push(data);
        while let Some((msg, _)) = self.decoder.next_message()? {
            match msg {
                Message::SetupResponse { ok: true } => {
                    self.setup_done_at = Some(now);
                    out.notes.push(AppNote::SetupComplete);
                    self.pump(stack, now, out)?;
                }
                Message::SetupResponse { ok: false } => return Err(ReplicationError::SetupRejected),
                Message::PacketAck { seqno } => {
                    if seqno as usize != self.acked {
                        return Err(ReplicationError::Unexpected("out-of-order packet ack"));
                    }
                    self.acked += 1;
                    out.notes.push(AppNote::PacketAcked { seqno, outstanding: self.outstanding() });
                    if self.acked == self.packets.len() {
                        self.complete_at = Some(now);
                        out.notes.push(AppNote::BlockComplete);
                        out.control.push((Actor::NameNode, ControlMsg::BlockComplete));
                    } else {
                        self.pump(stack, now, out)?;
                    }
                }
                _ => return Err(ReplicationError::Unexpected("client received a data-path message")),
            }
        }
        Ok(())
    }

    fn pump(&mut self, stack: &mut Stack, now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        let conn = self.conn.expect("connected before setup completes");
        while self.outstanding() < self.cfg.write_max_packets && self.next_packet < self.packets.len() {
            let seqno = self.next_packet as u32;
            let bytes = self.packets[self.next_packet].clone();
            self.next_packet += 1;
            self.max_outstanding = self.max_outstanding.max(self.outstanding());
            write(stack, conn, &bytes, now, out)?;
            out.notes.push(AppNote::PacketSent { seqno, outstanding: self.outstanding() });
        }
        Ok(())
    }
}

/// One pipeline stage: stores every packet, forwards it downstream after it
/// is complete, and acknowledges upstream once it and all successors have it.
#[derive(Debug)]
pub struct DataNodeApp {
    cfg: NodeConfig,
    upstream: Option<ConnId>,
    up_decoder: Decoder,
    downstream: Option<ConnId>,
    down_decoder: Decoder,
    stage: u8,
    k: usize,
    block_id: u64,
    replica: Vec<u8>,
    received: BTreeSet<u32>,
    persisted: BTreeSet<u32>,
    down_acked: BTreeSet<u32>,
    pending_forward: BTreeMap<u32, Bytes>,
    next_ack: u32,
    last_seqno: Option<u32>,
}

impl DataNodeApp {
    pub fn new(cfg: NodeConfig) -> Self {
        DataNodeApp {
            cfg,
            upstream: None,
            up_decoder: Decoder::default(),
            downstream: None,
            down_decoder: Decoder::default(),
            stage: 0,
            k: 0,
            block_id: 0,
            replica: Vec::new(),
            received: BTreeSet::new(),
            persisted: BTreeSet::new(),
            down_acked: BTreeSet::new(),
            pending_forward: BTreeMap::new(),
            next_ack: 0,
            last_seqno: None,
        }
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn replica(&self) -> &[u8] {
        &self.replica
    }

    pub fn upstream(&self) -> Option<ConnId> {
        self.upstream
    }

    pub fn downstream(&self) -> Option<ConnId> {
        self.downstream
    }

    /// Every packet of the block persisted.
    pub fn complete(&self) -> bool {
        self.last_seqno.is_some_and(|l| self.persisted.len() == l as usize + 1)
    }

    pub fn on_accept(&mut self, conn: ConnId) {
        if self.upstream.is_none() {
            self.upstream = Some(conn);
        }
    }

    pub fn on_data(&mut self, stack: &mut Stack, conn: ConnId, data: &[u8], now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        if Some(conn) == self.upstream {
            self.up_decoder.push(data);
            while let Some((msg, raw)) = self.up_decoder.next_message()? {
                self.on_upstream(stack, conn, msg, raw, now, out)?;
            }
        } else if Some(conn) == self.downstream {
            self.down_decoder.push(data);
            while let Some((msg, _)) = self.down_decoder.next_message()? {
                self.on_downstream(stack, msg, now, out)?;
            }
        }
        Ok(())
    }

    fn on_upstream(
        &mut self,
        stack: &mut Stack,
        conn: ConnId,
        msg: Message,
        raw: Bytes,
        now: SimTime,
        out: &mut Outbox,
    ) -> Result<(), ReplicationError> {
        match msg {
            Message::WriteBlock { block_id, block_size, stage, targets } => {
                self.stage = stage;
                self.k = stage as usize + targets.len();
                self.block_id = block_id;
                self.replica = vec![0u8; block_size as usize];
                if self.cfg.mode == Mode::Mirrored && self.k >= 2 {
                    let c = stack.connection(conn).expect("live connection");
                    let (src, dst) = (c.remote(), c.local());
                    out.control.push((Actor::NameNode, ControlMsg::HopEstablished { hop: stage as usize - 1, src, dst }));
                }
                match targets.split_first() {
                    Some((next, rest)) => {
                        let down = open(stack, *next, now, out);
                        self.downstream = Some(down);
                        let setup = Message::WriteBlock { block_id, block_size, stage: stage + 1, targets: rest.to_vec() };
                        write(stack, down, &setup.encode(), now, out)?;
                        stack.connection_mut(down)?.mark_replication_start();
                    }
                    None => write(stack, conn, &Message::SetupResponse { ok: true }.encode(), now, out)?,
                }
            }
            Message::Packet { block_id, seqno, offset, last, data } => {
                if block_id != self.block_id {
                    return Err(ReplicationError::Unexpected("packet for another block"));
                }
                let start = offset as usize;
                self.replica[start..start + data.len()].copy_from_slice(&data);
                self.received.insert(seqno);
                if last {
                    self.last_seqno = Some(seqno);
                }
                if self.downstream.is_some() {
                    if self.cfg.forward_delay == SimTime::ZERO {
                        self.forward(stack, raw, now, out)?;
                    } else {
                        self.pending_forward.insert(seqno, raw);
                        out.timers.push((self.cfg.forward_delay, AppTimer::Forward(seqno)));
                    }
                }
                if self.cfg.persist_delay == SimTime::ZERO {
                    self.persist(stack, seqno, now, out)?;
                } else {
                    out.timers.push((self.cfg.persist_delay, AppTimer::Persist(seqno)));
                }
            }
            _ => return Err(ReplicationError::Unexpected("upstream sent a response message")),
        }
        Ok(())
    }

    fn on_downstream(&mut self, stack: &mut Stack, msg: Message, now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        match msg {
            Message::SetupResponse { ok: true } => {
                if self.cfg.mode == Mode::Mirrored && self.stage == 1 {
                    out.control.push((Actor::NameNode, ControlMsg::PipelineReady));
                } else {
                    self.respond_setup(stack, now, out)?;
                }
            }
            Message::SetupResponse { ok: false } => return Err(ReplicationError::SetupRejected),
            Message::PacketAck { seqno } => {
                self.down_acked.insert(seqno);
                self.try_ack(stack, now, out)?;
            }
            _ => return Err(ReplicationError::Unexpected("downstream sent a request message")),
        }
        Ok(())
    }

    fn respond_setup(&mut self, stack: &mut Stack, now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        let up = self.upstream.expect("setup arrives on the upstream connection");
        write(stack, up, &Message::SetupResponse { ok: true }.encode(), now, out)?;
        out.notes.push(AppNote::SetupComplete);
        Ok(())
    }

    pub fn on_control(&mut self, stack: &mut Stack, msg: ControlMsg, now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        match msg {
            ControlMsg::MirroringInstalled => self.respond_setup(stack, now, out),
            _ => Err(ReplicationError::Unexpected(msg.name())),
        }
    }

    pub fn on_timer(&mut self, stack: &mut Stack, timer: AppTimer, now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        match timer {
            AppTimer::Persist(seqno) => self.persist(stack, seqno, now, out),
            AppTimer::Forward(seqno) => {
                let raw = self.pending_forward.remove(&seqno).expect("forward timer for a pending packet");
                self.forward(stack, raw, now, out)
            }
        }
    }

    fn forward(&mut self, stack: &mut Stack, raw: Bytes, now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        let down = self.downstream.expect("forwarding requires a successor");
        write(stack, down, &raw, now, out)
    }

    fn persist(&mut self, stack: &mut Stack, seqno: u32, now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        self.persisted.insert(seqno);
        out.notes.push(AppNote::PacketPersisted(seqno));
        self.try_ack(stack, now, out)
    }

    fn try_ack(&mut self, stack: &mut Stack, now: SimTime, out: &mut Outbox) -> Result<(), ReplicationError> {
        let up = self.upstream.expect("acks flow upstream");
        while self.persisted.contains(&self.next_ack) && (self.downstream.is_none() || self.down_acked.contains(&self.next_ack)) {
            write(stack, up, &Message::PacketAck { seqno: self.next_ack }.encode(), now, out)?;
            self.next_ack += 1;
        }
        Ok(())
    }
}
