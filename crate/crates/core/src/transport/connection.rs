use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::net::SocketAddrV4;
use std::ops::Range;

use bytes::Bytes;

use super::segment::{Flags, Reserved, Segment};
use super::{TransportConfig, TransportError};
use crate::engine::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TcpState {
    Closed,
    Listen,
    SynSent,
    SynRcvd,
    Established,
    /// Sending side of a mirrored hop: data is virtually transmitted.
    MrSnd,
    /// Receiving side of a mirrored hop: client copies are translated.
    MrRcv,
    FinWait1,
    FinWait2,
    Closing,
    CloseWait,
    LastAck,
    TimeWait,
}

impl TcpState {
    fn is_open(self) -> bool {
        matches!(self, TcpState::Established | TcpState::MrSnd | TcpState::MrRcv)
    }

    fn can_send_data(self) -> bool {
        self.is_open() || self == TcpState::CloseWait
    }
}

impl fmt::Display for TcpState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TcpState::Closed => "CLOSED",
            TcpState::Listen => "LISTEN",
            TcpState::SynSent => "SYN_SENT",
            TcpState::SynRcvd => "SYN_RCVD",
            TcpState::Established => "ESTABLISHED",
            TcpState::MrSnd => "MR_SND",
            TcpState::MrRcv => "MR_RCV",
            TcpState::FinWait1 => "FIN_WAIT_1",
            TcpState::FinWait2 => "FIN_WAIT_2",
            TcpState::Closing => "CLOSING",
            TcpState::CloseWait => "CLOSE_WAIT",
            TcpState::LastAck => "LAST_ACK",
            TcpState::TimeWait => "TIME_WAIT",
        };
        f.write_str(s)
    }
}

/// Sequence compensation between the mirrored client stream and the local
/// predecessor stream.
pub fn compute_delta(n_j: u64, n_1: u64) -> i64 {
    n_j as i64 - n_1 as i64
}

/// Maps a client-stream sequence number into the predecessor-stream space.
/// `None` when the result would be negative.
pub fn translate_seq(seq: u64, delta: i64) -> Option<u64> {
    let t = seq as i128 + delta as i128;
    (t >= 0).then_some(t as u64)
}

/// The two sequence numbers observed at the mirrored sync point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MirrorSyncRecord {
    /// Sequence number carried by the mirrored sync ACK.
    pub n_1: u64,
    /// Local `rcv_nxt` on the predecessor connection at sync time.
    pub n_j: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TxReason {
    /// Handshake, FIN, or pure ACK.
    Control,
    New,
    FastRetransmit,
    /// Retransmission after the retransmission timer expired.
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emitted {
    pub segment: Segment,
    pub reason: TxReason,
    /// Payload belongs to the replicated block stream.
    pub replication: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConnEvent {
    Established,
    EnteredMrSnd,
    EnteredMrRcv(MirrorSyncRecord, i64),
    EarlyAckStored(u64),
    EarlyAckApplied(u64),
    VirtualTransmit(Range<u64>),
    RtoFired { retransmitted: usize },
    /// Mirrored data arrived before the sync ACK; mirroring is abandoned for
    /// this block and the hop falls back to chain transfer.
    MirrorUnsynced,
    MirrorNotConfigured,
    OutOfOrderDropped(u64),
    PeerFin,
    Reset,
    Closed,
}

#[derive(Debug, Default)]
pub struct Effects {
    pub emitted: Vec<Emitted>,
    pub delivered: Vec<Bytes>,
    pub events: Vec<ConnEvent>,
    /// New retransmission deadline, if the timer was (re)armed.
    pub timer: Option<SimTime>,
}

impl Effects {
    pub fn merge(&mut self, other: Effects) {
        self.emitted.extend(other.emitted);
        self.delivered.extend(other.delivered);
        self.events.extend(other.events);
        if other.timer.is_some() {
            self.timer = other.timer;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConnStats {
    pub segments_sent: u64,
    pub payload_bytes_sent: u64,
    pub retransmitted_segments: u64,
    pub timeout_retransmitted_bytes: u64,
    pub fast_retransmits: u64,
    pub rto_fires: u64,
    pub virtual_bytes: u64,
    pub early_acks_stored: u64,
    pub early_acks_applied: u64,
    pub mirrored_accepted_bytes: u64,
    pub mirrored_duplicates: u64,
    pub mirrored_signaling_ignored: u64,
    pub mirrored_stray: u64,
    pub mirrored_unsynced: u64,
    pub mirrored_unconfigured: u64,
    pub duplicate_segments: u64,
    pub ooo_dropped: u64,
    pub ooo_dropped_bytes: u64,
}

/// One endpoint of a simplified TCP connection, including the mirrored
/// replication extension. The connection is sans-IO: every entry point
/// returns the segments to emit and the bytes delivered to the application.
#[derive(Debug, Clone)]
pub struct Connection {
    local: SocketAddrV4,
    remote: SocketAddrV4,
    state: TcpState,
    cfg: TransportConfig,

    iss: u64,
    snd_una: u64,
    snd_nxt: u64,
    snd_wnd: u64,
    /// Sequence number of `send_buf[0]`.
    buf_start: u64,
    send_buf: VecDeque<u8>,
    fin_queued: bool,
    fin_seq: Option<u64>,
    dup_acks: u32,
    rto: SimTime,
    rto_deadline: Option<SimTime>,
    early_acks: BTreeSet<u64>,
    replication_from: Option<u64>,

    rcv_nxt: u64,
    ooo: BTreeMap<u64, Bytes>,
    ooo_bytes: u64,
    fin_received: bool,

    mr_delta: Option<i64>,
    mr_abandoned: bool,

    stats: ConnStats,
}

impl Connection {
    fn new(local: SocketAddrV4, remote: SocketAddrV4, iss: u64, cfg: TransportConfig, state: TcpState) -> Self {
        Connection {
            local,
            remote,
            state,
            cfg,
            iss,
            snd_una: iss,
            snd_nxt: iss,
            snd_wnd: cfg.rcv_buffer,
            buf_start: iss + 1,
            send_buf: VecDeque::new(),
            fin_queued: false,
            fin_seq: None,
            dup_acks: 0,
            rto: cfg.rto_initial,
            rto_deadline: None,
            early_acks: BTreeSet::new(),
            replication_from: None,
            rcv_nxt: 0,
            ooo: BTreeMap::new(),
            ooo_bytes: 0,
            fin_received: false,
            mr_delta: None,
            mr_abandoned: false,
            stats: ConnStats::default(),
        }
    }

    /// Active open: emits a SYN.
    pub fn connect(local: SocketAddrV4, remote: SocketAddrV4, iss: u64, cfg: TransportConfig, now: SimTime) -> (Self, Effects) {
        let mut conn = Connection::new(local, remote, iss, cfg, TcpState::SynSent);
        let mut eff = Effects::default();
        let syn = conn.segment(iss, Flags::SYN, Bytes::new());
        conn.snd_nxt = iss + 1;
        conn.push(&mut eff, syn, TxReason::Control, false);
        conn.arm_timer(now, &mut eff);
        (conn, eff)
    }

    /// Passive open in response to `syn`: emits a SYN-ACK.
    pub fn accept(local: SocketAddrV4, syn: &Segment, iss: u64, cfg: TransportConfig, now: SimTime) -> (Self, Effects) {
        let mut conn = Connection::new(local, syn.src, iss, cfg, TcpState::SynRcvd);
        conn.rcv_nxt = syn.seq + 1;
        conn.snd_wnd = syn.window;
        let mut eff = Effects::default();
        let synack = conn.segment(iss, Flags::SYN | Flags::ACK, Bytes::new());
        conn.snd_nxt = iss + 1;
        conn.push(&mut eff, synack, TxReason::Control, false);
        conn.arm_timer(now, &mut eff);
        (conn, eff)
    }

    pub fn local(&self) -> SocketAddrV4 {
        self.local
    }

    pub fn remote(&self) -> SocketAddrV4 {
        self.remote
    }

    pub fn state(&self) -> TcpState {
        self.state
    }

    pub fn snd_una(&self) -> u64 {
        self.snd_una
    }

    pub fn snd_nxt(&self) -> u64 {
        self.snd_nxt
    }

    pub fn rcv_nxt(&self) -> u64 {
        self.rcv_nxt
    }

    pub fn delta(&self) -> Option<i64> {
        self.mr_delta
    }

    pub fn stats(&self) -> &ConnStats {
        &self.stats
    }

    pub fn early_acks(&self) -> &BTreeSet<u64> {
        &self.early_acks
    }

    pub fn rto_deadline(&self) -> Option<SimTime> {
        self.rto_deadline
    }

    pub fn current_rto(&self) -> SimTime {
        self.rto
    }

    pub fn out_of_order_bytes(&self) -> u64 {
        self.ooo_bytes
    }

    /// End of the bytes written by the application.
    pub fn write_end(&self) -> u64 {
        self.buf_start + self.send_buf.len() as u64
    }

    pub fn is_closed(&self) -> bool {
        matches!(self.state, TcpState::Closed | TcpState::TimeWait)
    }

    fn window(&self) -> u64 {
        self.cfg.rcv_buffer.saturating_sub(self.ooo_bytes)
    }

    fn outgoing_reserved(&self) -> Reserved {
        if self.mr_delta.is_some() {
            Reserved::MrAck
        } else {
            Reserved::Normal
        }
    }

    fn segment(&self, seq: u64, flags: Flags, payload: Bytes) -> Segment {
        Segment {
            src: self.local,
            dst: self.remote,
            seq,
            ack: if flags.contains(Flags::ACK) { self.rcv_nxt } else { 0 },
            flags,
            reserved: self.outgoing_reserved(),
            window: self.window(),
            payload,
        }
    }

    fn push(&mut self, eff: &mut Effects, segment: Segment, reason: TxReason, replication: bool) {
        self.stats.segments_sent += 1;
        self.stats.payload_bytes_sent += segment.len() as u64;
        eff.emitted.push(Emitted { segment, reason, replication });
    }

    fn emit_ack(&mut self, eff: &mut Effects) {
        let ack = self.segment(self.snd_nxt, Flags::ACK, Bytes::new());
        self.push(eff, ack, TxReason::Control, false);
    }

    fn arm_timer(&mut self, now: SimTime, eff: &mut Effects) {
        let at = now + self.rto;
        self.rto_deadline = Some(at);
        eff.timer = Some(at);
    }

    fn arm_if_idle(&mut self, now: SimTime, eff: &mut Effects) {
        if self.rto_deadline.is_none() {
            self.arm_timer(now, eff);
        }
    }

    fn payload_range(&self, range: Range<u64>) -> Bytes {
        let from = (range.start - self.buf_start) as usize;
        let to = (range.end - self.buf_start) as usize;
        Bytes::from(self.send_buf.range(from..to).copied().collect::<Vec<u8>>())
    }

    fn is_replication(&self, seq: u64) -> bool {
        self.replication_from.is_some_and(|r| seq >= r)
    }

    /// Tags every byte written from now on as replicated block data.
    pub fn mark_replication_start(&mut self) {
        self.replication_from = Some(self.write_end());
    }

    /// Appends application data and transmits what the state allows.
    pub fn write(&mut self, data: &[u8], now: SimTime) -> Result<Effects, TransportError> {
        if self.fin_queued || !(self.state.can_send_data() || matches!(self.state, TcpState::SynSent | TcpState::SynRcvd)) {
            return Err(TransportError::NotWritable(self.state));
        }
        self.send_buf.extend(data);
        let mut eff = Effects::default();
        self.flush(now, &mut eff);
        Ok(eff)
    }

    /// Queues a FIN after all written data.
    pub fn close(&mut self, now: SimTime) -> Effects {
        let mut eff = Effects::default();
        if !self.fin_queued && !self.is_closed() {
            self.fin_queued = true;
            self.flush(now, &mut eff);
        }
        eff
    }

    /// Leaves MR_SND / MR_RCV so the next block re-synchronizes.
    pub fn end_mirroring(&mut self) {
        if matches!(self.state, TcpState::MrSnd | TcpState::MrRcv) {
            self.state = TcpState::Established;
        }
        self.mr_delta = None;
        self.mr_abandoned = false;
        self.early_acks.clear();
    }

    /// Consumes the sync record, installs `delta` and enters MR_RCV.
    pub fn apply_sync(&mut self, record: MirrorSyncRecord) -> Result<i64, TransportError> {
        if self.mr_delta.is_some() {
            return Err(TransportError::AlreadySynced);
        }
        let delta = compute_delta(record.n_j, record.n_1);
        self.mr_delta = Some(delta);
        if self.state.is_open() {
            self.state = TcpState::MrRcv;
        }
        Ok(delta)
    }

    /// Whether `len` more out-of-order bytes fit in the receive buffer.
    pub fn flow_window_check(&self, len: u64) -> bool {
        self.ooo_bytes + len <= self.cfg.rcv_buffer
    }

    fn flush(&mut self, now: SimTime, eff: &mut Effects) {
        if !self.state.can_send_data() {
            return;
        }
        let end = self.write_end();
        if self.state == TcpState::MrSnd {
            if end > self.snd_nxt {
                let range = self.snd_nxt..end;
                self.virtual_transmit_into(range, now, eff);
            }
        } else {
            while self.snd_nxt < end {
                let len = (self.cfg.mss as u64).min(end - self.snd_nxt);
                let in_flight = self.snd_nxt - self.snd_una;
                if in_flight > 0 && in_flight + len > self.snd_wnd {
                    break;
                }
                let seq = self.snd_nxt;
                let payload = self.payload_range(seq..seq + len);
                let seg = self.segment(seq, Flags::ACK, payload);
                let replication = self.is_replication(seq);
                self.push(eff, seg, TxReason::New, replication);
                self.snd_nxt += len;
                self.arm_if_idle(now, eff);
            }
        }
        if self.fin_queued && self.fin_seq.is_none() && self.snd_nxt == end {
            let fin = self.segment(end, Flags::FIN | Flags::ACK, Bytes::new());
            self.push(eff, fin, TxReason::Control, false);
            self.fin_seq = Some(end);
            self.snd_nxt = end + 1;
            self.arm_if_idle(now, eff);
            self.state = match self.state {
                TcpState::CloseWait => TcpState::LastAck,
                _ => TcpState::FinWait1,
            };
        }
    }

    /// Advances `snd_nxt` over `range` without emitting anything, then applies
    /// any stored early ACK the new window now covers.
    pub fn virtual_transmit(&mut self, range: Range<u64>, now: SimTime) -> Result<Effects, TransportError> {
        if self.state != TcpState::MrSnd {
            return Err(TransportError::NotMirroredSender(self.state));
        }
        if range.start != self.snd_nxt || range.end > self.write_end() || range.start > range.end {
            return Err(TransportError::NotContiguous { start: range.start, snd_nxt: self.snd_nxt });
        }
        let mut eff = Effects::default();
        self.virtual_transmit_into(range, now, &mut eff);
        Ok(eff)
    }

    fn virtual_transmit_into(&mut self, range: Range<u64>, now: SimTime, eff: &mut Effects) {
        let len = range.end - range.start;
        if len == 0 {
            return;
        }
        self.snd_nxt = range.end;
        self.stats.virtual_bytes += len;
        eff.events.push(ConnEvent::VirtualTransmit(range));
        self.arm_if_idle(now, eff);
        let covered: Vec<u64> = self.early_acks.range(..=self.snd_nxt).copied().collect();
        if let Some(&ack) = covered.last() {
            for a in &covered {
                self.early_acks.remove(a);
            }
            self.stats.early_acks_applied += 1;
            eff.events.push(ConnEvent::EarlyAckApplied(ack));
            self.advance_una(ack, now, eff);
        }
    }

    fn advance_una(&mut self, ack: u64, now: SimTime, eff: &mut Effects) {
        if ack <= self.snd_una {
            return;
        }
        self.snd_una = ack;
        let data_acked = ack.min(self.write_end()).saturating_sub(self.buf_start);
        self.send_buf.drain(..data_acked as usize);
        self.buf_start += data_acked;
        self.dup_acks = 0;
        self.rto = self.cfg.rto_initial;
        if self.snd_una >= self.snd_nxt {
            self.rto_deadline = None;
        } else {
            self.arm_timer(now, eff);
        }
        if self.fin_seq.is_some_and(|f| ack > f) {
            self.state = match self.state {
                TcpState::FinWait1 => TcpState::FinWait2,
                TcpState::Closing => TcpState::TimeWait,
                TcpState::LastAck => TcpState::Closed,
                s => s,
            };
            if self.is_closed() {
                eff.events.push(ConnEvent::Closed);
            }
        }
    }

    fn process_ack(&mut self, seg: &Segment, now: SimTime, eff: &mut Effects) {
        if seg.reserved == Reserved::MrAck && self.state == TcpState::Established {
            self.state = TcpState::MrSnd;
            eff.events.push(ConnEvent::EnteredMrSnd);
        }
        self.snd_wnd = seg.window;
        let mirrored_sender = self.state == TcpState::MrSnd;
        if seg.ack > self.snd_nxt {
            if mirrored_sender {
                if self.early_acks.insert(seg.ack) {
                    self.stats.early_acks_stored += 1;
                    eff.events.push(ConnEvent::EarlyAckStored(seg.ack));
                }
            }
            return;
        }
        if seg.ack > self.snd_una {
            self.advance_una(seg.ack, now, eff);
        } else if seg.ack == self.snd_una && seg.is_empty() && !seg.flags.contains(Flags::FIN) && self.snd_nxt > self.snd_una {
            // Virtual windows have no segment to fast-retransmit.
            if !mirrored_sender {
                self.dup_acks += 1;
                if self.dup_acks == self.cfg.dupack_threshold {
                    self.fast_retransmit(eff);
                }
            }
        }
    }

    fn fast_retransmit(&mut self, eff: &mut Effects) {
        let end = self.snd_nxt.min(self.write_end());
        if self.snd_una >= end {
            return;
        }
        let len = (self.cfg.mss as u64).min(end - self.snd_una);
        let seq = self.snd_una;
        let payload = self.payload_range(seq..seq + len);
        let seg = self.segment(seq, Flags::ACK, payload);
        let replication = self.is_replication(seq);
        self.stats.fast_retransmits += 1;
        self.stats.retransmitted_segments += 1;
        self.push(eff, seg, TxReason::FastRetransmit, replication);
    }

    /// Stores bytes at local sequence `seq`. Returns whether anything new was
    /// accepted.
    fn receive_data(&mut self, seq: u64, payload: Bytes, eff: &mut Effects) -> bool {
        let end = seq + payload.len() as u64;
        if end <= self.rcv_nxt {
            self.stats.duplicate_segments += 1;
            return false;
        }
        if seq <= self.rcv_nxt {
            let skip = (self.rcv_nxt - seq) as usize;
            eff.delivered.push(payload.slice(skip..));
            self.rcv_nxt = end;
            self.drain_ooo(eff);
            return true;
        }
        if let Some(existing) = self.ooo.get(&seq) {
            if existing.len() >= payload.len() {
                self.stats.duplicate_segments += 1;
                return false;
            }
        }
        if !self.flow_window_check(payload.len() as u64) {
            self.stats.ooo_dropped += 1;
            self.stats.ooo_dropped_bytes += payload.len() as u64;
            eff.events.push(ConnEvent::OutOfOrderDropped(seq));
            return false;
        }
        self.ooo_bytes += payload.len() as u64;
        if let Some(old) = self.ooo.insert(seq, payload) {
            self.ooo_bytes -= old.len() as u64;
        }
        true
    }

    fn drain_ooo(&mut self, eff: &mut Effects) {
        while let Some((&start, _)) = self.ooo.first_key_value() {
            if start > self.rcv_nxt {
                break;
            }
            let chunk = self.ooo.remove(&start).expect("present");
            self.ooo_bytes -= chunk.len() as u64;
            let end = start + chunk.len() as u64;
            if end > self.rcv_nxt {
                eff.delivered.push(chunk.slice((self.rcv_nxt - start) as usize..));
                self.rcv_nxt = end;
            }
        }
    }

    fn on_mirrored(&mut self, seg: Segment, eff: &mut Effects) {
        if !self.cfg.mr_enabled {
            self.stats.mirrored_unconfigured += 1;
            eff.events.push(ConnEvent::MirrorNotConfigured);
            return;
        }
        let Some(delta) = self.mr_delta else {
            if self.mr_abandoned {
                self.stats.mirrored_unsynced += 1;
            } else if seg.is_empty() && seg.flags.contains(Flags::ACK) {
                let record = MirrorSyncRecord { n_1: seg.seq, n_j: self.rcv_nxt };
                let delta = self.apply_sync(record).expect("delta unset");
                eff.events.push(ConnEvent::EnteredMrRcv(record, delta));
            } else {
                self.stats.mirrored_unsynced += 1;
                self.mr_abandoned = true;
                eff.events.push(ConnEvent::MirrorUnsynced);
            }
            return;
        };
        // Flags and the ACK number belong to the client/D_1 conversation.
        if seg.is_empty() {
            self.stats.mirrored_signaling_ignored += 1;
            return;
        }
        let Some(seq) = translate_seq(seg.seq, delta) else {
            self.stats.mirrored_stray += 1;
            return;
        };
        let len = seg.len() as u64;
        if self.receive_data(seq, seg.payload, eff) {
            self.stats.mirrored_accepted_bytes += len;
        } else {
            self.stats.mirrored_duplicates += 1;
        }
        self.emit_ack(eff);
    }

    /// Processes one inbound segment addressed to this connection.
    pub fn on_segment(&mut self, seg: Segment, now: SimTime) -> Effects {
        let mut eff = Effects::default();
        if seg.reserved == Reserved::Mirrored {
            self.on_mirrored(seg, &mut eff);
            return eff;
        }
        match self.state {
            TcpState::Closed | TcpState::Listen => return eff,
            TcpState::SynSent => {
                if seg.flags.contains(Flags::SYN | Flags::ACK) && seg.ack == self.iss + 1 {
                    self.rcv_nxt = seg.seq + 1;
                    self.snd_una = self.iss + 1;
                    self.snd_wnd = seg.window;
                    self.rto_deadline = None;
                    self.rto = self.cfg.rto_initial;
                    self.state = TcpState::Established;
                    eff.events.push(ConnEvent::Established);
                    self.emit_ack(&mut eff);
                    self.flush(now, &mut eff);
                }
                return eff;
            }
            TcpState::SynRcvd => {
                if seg.flags.contains(Flags::SYN) {
                    let synack = self.segment(self.iss, Flags::SYN | Flags::ACK, Bytes::new());
                    self.push(&mut eff, synack, TxReason::Control, false);
                    return eff;
                }
                if seg.flags.contains(Flags::ACK) && seg.ack > self.iss {
                    self.snd_una = self.iss + 1;
                    self.rto_deadline = None;
                    self.rto = self.cfg.rto_initial;
                    self.state = TcpState::Established;
                    eff.events.push(ConnEvent::Established);
                } else {
                    return eff;
                }
            }
            _ => {
                if seg.flags.contains(Flags::SYN) {
                    // Retransmitted SYN-ACK: our handshake ACK was lost.
                    self.emit_ack(&mut eff);
                    return eff;
                }
            }
        }
        if seg.flags.contains(Flags::RST) {
            self.state = TcpState::Closed;
            self.rto_deadline = None;
            eff.events.push(ConnEvent::Reset);
            return eff;
        }
        if seg.flags.contains(Flags::ACK) {
            self.process_ack(&seg, now, &mut eff);
        }
        let mut needs_ack = false;
        if !seg.is_empty() {
            let (seq, fin, payload) = (seg.seq, seg.flags.contains(Flags::FIN), seg.payload.clone());
            self.receive_data(seq, payload, &mut eff);
            needs_ack = true;
            if fin {
                self.receive_fin(seq + seg.len() as u64, &mut eff);
            }
        } else if seg.flags.contains(Flags::FIN) {
            self.receive_fin(seg.seq, &mut eff);
            needs_ack = true;
        }
        if needs_ack {
            self.emit_ack(&mut eff);
        }
        self.flush(now, &mut eff);
        eff
    }

    fn receive_fin(&mut self, fin_seq: u64, eff: &mut Effects) {
        if self.fin_received || fin_seq != self.rcv_nxt {
            return;
        }
        self.fin_received = true;
        self.rcv_nxt += 1;
        eff.events.push(ConnEvent::PeerFin);
        self.state = match self.state {
            TcpState::Established | TcpState::MrSnd | TcpState::MrRcv => TcpState::CloseWait,
            TcpState::FinWait1 => TcpState::Closing,
            TcpState::FinWait2 => TcpState::TimeWait,
            s => s,
        };
        if self.state == TcpState::TimeWait {
            eff.events.push(ConnEvent::Closed);
        }
    }

    /// Timer callback; ignored unless `now` is the live deadline.
    pub fn on_timer(&mut self, now: SimTime) -> Effects {
        if self.rto_deadline != Some(now) {
            return Effects::default();
        }
        self.on_rto(now)
    }

    /// Retransmission timeout: resends `[snd_una, snd_nxt)` as real segments
    /// in MSS units and re-arms the timer with binary backoff.
    pub fn on_rto(&mut self, now: SimTime) -> Effects {
        let mut eff = Effects::default();
        self.rto_deadline = None;
        if self.snd_una >= self.snd_nxt {
            return eff;
        }
        self.stats.rto_fires += 1;
        let mut retransmitted = 0;
        match self.state {
            TcpState::SynSent => {
                let syn = self.segment(self.iss, Flags::SYN, Bytes::new());
                self.push(&mut eff, syn, TxReason::Timeout, false);
                retransmitted += 1;
            }
            TcpState::SynRcvd => {
                let synack = self.segment(self.iss, Flags::SYN | Flags::ACK, Bytes::new());
                self.push(&mut eff, synack, TxReason::Timeout, false);
                retransmitted += 1;
            }
            _ => {
                let data_end = self.snd_nxt.min(self.write_end());
                let mut seq = self.snd_una.max(self.buf_start);
                while seq < data_end {
                    let len = (self.cfg.mss as u64).min(data_end - seq);
                    let payload = self.payload_range(seq..seq + len);
                    let seg = self.segment(seq, Flags::ACK, payload);
                    let replication = self.is_replication(seq);
                    self.stats.timeout_retransmitted_bytes += len;
                    self.push(&mut eff, seg, TxReason::Timeout, replication);
                    retransmitted += 1;
                    seq += len;
                }
                if let Some(fin) = self.fin_seq {
                    if self.snd_una <= fin {
                        let seg = self.segment(fin, Flags::FIN | Flags::ACK, Bytes::new());
                        self.push(&mut eff, seg, TxReason::Timeout, false);
                        retransmitted += 1;
                    }
                }
            }
        }
        self.stats.retransmitted_segments += retransmitted as u64;
        self.dup_acks = 0;
        self.rto = SimTime((self.rto.0 * 2).min(self.cfg.rto_max.0));
        self.arm_timer(now, &mut eff);
        eff.events.push(ConnEvent::RtoFired { retransmitted });
        eff
    }
}
