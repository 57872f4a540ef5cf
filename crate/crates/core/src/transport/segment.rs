use std::fmt;
use std::net::SocketAddrV4;

use bitflags::bitflags;
use bytes::Bytes;

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Flags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const ACK = 0x10;
        const ECE = 0x40;
        const CWR = 0x80;
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        let names = [
            (Flags::SYN, "S"),
            (Flags::ACK, "A"),
            (Flags::FIN, "F"),
            (Flags::RST, "R"),
            (Flags::ECE, "E"),
            (Flags::CWR, "C"),
        ];
        for (flag, name) in names {
            if self.contains(flag) {
                f.write_str(name)?;
            }
        }
        Ok(())
    }
}

/// Value of the TCP header's reserved bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Reserved {
    #[default]
    Normal = 0,
    /// A switch-mirrored copy of a client segment, rewritten to look like it
    /// came from the predecessor.
    Mirrored = 1,
    /// ACK from a mirrored receiver; moves its predecessor into MR_SND.
    MrAck = 2,
}

impl Reserved {
    pub fn bits(self) -> u8 {
        self as u8
    }

    pub fn from_bits(bits: u8) -> Option<Reserved> {
        match bits {
            0 => Some(Reserved::Normal),
            1 => Some(Reserved::Mirrored),
            2 => Some(Reserved::MrAck),
            _ => None,
        }
    }
}

pub const TCP_PROTOCOL: u8 = 6;

/// IP + TCP header bytes charged per frame on the wire.
pub const HEADER_BYTES: usize = 40;

/// A simulated TCP segment. Sequence numbers are 64-bit byte offsets and
/// never wrap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub seq: u64,
    pub ack: u64,
    pub flags: Flags,
    pub reserved: Reserved,
    /// Advertised receive window in bytes.
    pub window: u64,
    pub payload: Bytes,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    /// Sequence space consumed, counting SYN and FIN.
    pub fn seq_len(&self) -> u64 {
        self.payload.len() as u64
            + u64::from(self.flags.contains(Flags::SYN))
            + u64::from(self.flags.contains(Flags::FIN))
    }

    pub fn wire_len(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}->{} seq={} ack={} flags={} res={} len={}",
            self.src,
            self.dst,
            self.seq,
            self.ack,
            self.flags,
            self.reserved.bits(),
            self.payload.len()
        )
    }
}
