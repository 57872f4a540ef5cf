//! Simplified reliable byte-stream transport with the mirrored-replication
//! extension (MR_SND / MR_RCV).
//!
//! Cumulative ACKs, go-back-N retransmission on timeout, fast retransmit on
//! three duplicate ACKs for real (non-virtual) windows, and a receive buffer
//! that bounds the out-of-order store. No congestion control.

mod connection;
mod segment;

use std::collections::{BTreeMap, BTreeSet};
use std::net::{Ipv4Addr, SocketAddrV4};

pub use connection::{
    compute_delta, translate_seq, ConnEvent, ConnStats, Connection, Effects, Emitted, MirrorSyncRecord, TcpState,
    TxReason,
};
pub use segment::{Flags, Reserved, Segment, HEADER_BYTES, TCP_PROTOCOL};

use crate::engine::{derive_seed, SimTime};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportConfig {
    pub mss: usize,
    pub rto_initial: SimTime,
    pub rto_max: SimTime,
    /// Receive buffer capacity in bytes; bounds the out-of-order store.
    pub rcv_buffer: u64,
    pub dupack_threshold: u32,
    /// The stack understands mirrored segments (reserved = 1).
    pub mr_enabled: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            mss: 1460,
            rto_initial: SimTime::from_millis(200),
            rto_max: SimTime::from_millis(3_200),
            rcv_buffer: 20 * 64 * 1024,
            dupack_threshold: 3,
            mr_enabled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("connection in state {0} does not accept writes")]
    NotWritable(TcpState),
    #[error("virtual transmission requires MR_SND, connection is {0}")]
    NotMirroredSender(TcpState),
    #[error("virtual transmission must start at snd_nxt {snd_nxt}, got {start}")]
    NotContiguous { start: u64, snd_nxt: u64 },
    #[error("sequence compensation already computed for this block")]
    AlreadySynced,
    #[error("unknown connection {0:?}")]
    UnknownConnection(ConnId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId(pub usize);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StackStats {
    /// Segments that matched no connection or listener.
    pub unmatched: u64,
    pub unmatched_mirrored: u64,
}

/// Outcome of demultiplexing an inbound segment.
#[derive(Debug)]
pub struct Delivery {
    pub conn: ConnId,
    pub accepted: bool,
    pub effects: Effects,
}

/// Per-host connection table.
#[derive(Debug, Clone)]
pub struct Stack {
    ip: Ipv4Addr,
    cfg: TransportConfig,
    seed: u64,
    conns: Vec<Connection>,
    by_tuple: BTreeMap<(SocketAddrV4, SocketAddrV4), ConnId>,
    listeners: BTreeSet<u16>,
    next_port: u16,
    stats: StackStats,
}

impl Stack {
    pub fn new(ip: Ipv4Addr, cfg: TransportConfig, seed: u64) -> Self {
        Stack {
            ip,
            cfg,
            seed,
            conns: Vec::new(),
            by_tuple: BTreeMap::new(),
            listeners: BTreeSet::new(),
            next_port: 40_000,
            stats: StackStats::default(),
        }
    }

    pub fn ip(&self) -> Ipv4Addr {
        self.ip
    }

    pub fn config(&self) -> &TransportConfig {
        &self.cfg
    }

    pub fn stats(&self) -> StackStats {
        self.stats
    }

    pub fn listen(&mut self, port: u16) {
        self.listeners.insert(port);
    }

    pub fn connection(&self, id: ConnId) -> Option<&Connection> {
        self.conns.get(id.0)
    }

    pub fn connection_mut(&mut self, id: ConnId) -> Result<&mut Connection, TransportError> {
        self.conns.get_mut(id.0).ok_or(TransportError::UnknownConnection(id))
    }

    pub fn connections(&self) -> impl Iterator<Item = (ConnId, &Connection)> {
        self.conns.iter().enumerate().map(|(i, c)| (ConnId(i), c))
    }

    fn isn(&self, local: SocketAddrV4, remote: SocketAddrV4) -> u64 {
        let s = derive_seed(
            self.seed,
            &[u32::from(*local.ip()) as u64, local.port() as u64, u32::from(*remote.ip()) as u64, remote.port() as u64],
        );
        // Leave room below so negative compensations stay representable.
        1_000_000 + (s % (1 << 31))
    }

    fn insert(&mut self, conn: Connection) -> ConnId {
        let id = ConnId(self.conns.len());
        self.by_tuple.insert((conn.local(), conn.remote()), id);
        self.conns.push(conn);
        id
    }

    /// Opens a connection from a fresh ephemeral port.
    pub fn connect(&mut self, remote: SocketAddrV4, now: SimTime) -> (ConnId, Effects) {
        let local = SocketAddrV4::new(self.ip, self.next_port);
        self.next_port += 1;
        let iss = self.isn(local, remote);
        let (conn, eff) = Connection::connect(local, remote, iss, self.cfg, now);
        (self.insert(conn), eff)
    }

    /// Routes an inbound segment to its connection, creating one for a SYN
    /// on a listening port.
    pub fn on_segment(&mut self, seg: Segment, now: SimTime) -> Option<Delivery> {
        if let Some(&id) = self.by_tuple.get(&(seg.dst, seg.src)) {
            let effects = self.conns[id.0].on_segment(seg, now);
            return Some(Delivery { conn: id, accepted: false, effects });
        }
        if seg.flags.contains(Flags::SYN)
            && !seg.flags.contains(Flags::ACK)
            && seg.reserved == Reserved::Normal
            && self.listeners.contains(&seg.dst.port())
        {
            let iss = self.isn(seg.dst, seg.src);
            let (conn, effects) = Connection::accept(seg.dst, &seg, iss, self.cfg, now);
            let id = self.insert(conn);
            return Some(Delivery { conn: id, accepted: true, effects });
        }
        self.stats.unmatched += 1;
        if seg.reserved == Reserved::Mirrored {
            self.stats.unmatched_mirrored += 1;
        }
        None
    }

    pub fn write(&mut self, id: ConnId, data: &[u8], now: SimTime) -> Result<Effects, TransportError> {
        self.connection_mut(id)?.write(data, now)
    }

    pub fn close(&mut self, id: ConnId, now: SimTime) -> Result<Effects, TransportError> {
        Ok(self.connection_mut(id)?.close(now))
    }

    pub fn on_timer(&mut self, id: ConnId, now: SimTime) -> Result<Effects, TransportError> {
        Ok(self.connection_mut(id)?.on_timer(now))
    }

    /// Summed statistics over all connections.
    pub fn totals(&self) -> ConnStats {
        let mut t = ConnStats::default();
        for c in &self.conns {
            let s = c.stats();
            t.segments_sent += s.segments_sent;
            t.payload_bytes_sent += s.payload_bytes_sent;
            t.retransmitted_segments += s.retransmitted_segments;
            t.timeout_retransmitted_bytes += s.timeout_retransmitted_bytes;
            t.fast_retransmits += s.fast_retransmits;
            t.rto_fires += s.rto_fires;
            t.virtual_bytes += s.virtual_bytes;
            t.early_acks_stored += s.early_acks_stored;
            t.early_acks_applied += s.early_acks_applied;
            t.mirrored_accepted_bytes += s.mirrored_accepted_bytes;
            t.mirrored_duplicates += s.mirrored_duplicates;
            t.mirrored_signaling_ignored += s.mirrored_signaling_ignored;
            t.mirrored_stray += s.mirrored_stray;
            t.mirrored_unsynced += s.mirrored_unsynced;
            t.mirrored_unconfigured += s.mirrored_unconfigured;
            t.duplicate_segments += s.duplicate_segments;
            t.ooo_dropped += s.ooo_dropped;
            t.ooo_dropped_bytes += s.ooo_dropped_bytes;
        }
        t
    }
}
