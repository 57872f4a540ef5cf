use std::net::{Ipv4Addr, SocketAddrV4};

use bytes::{Buf, BufMut, Bytes, BytesMut};

/// Type byte plus big-endian body length.
pub const FRAME_HEADER_BYTES: usize = 5;
/// Framing plus block id, sequence number, offset and last-packet flag.
pub const PACKET_HEADER_BYTES: usize = FRAME_HEADER_BYTES + 8 + 4 + 8 + 1;

const WRITE_BLOCK: u8 = 1;
const SETUP_RESPONSE: u8 = 2;
const PACKET: u8 = 3;
const PACKET_ACK: u8 = 4;

/// Application messages exchanged over pipeline connections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    WriteBlock {
        block_id: u64,
        block_size: u64,
        /// 1-based position of the receiver in the pipeline.
        stage: u8,
        /// Remaining downstream nodes.
        targets: Vec<SocketAddrV4>,
    },
    SetupResponse {
        ok: bool,
    },
    Packet {
        block_id: u64,
        seqno: u32,
        offset: u64,
        last: bool,
        data: Bytes,
    },
    PacketAck {
        seqno: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed body for message type {0}")]
    Malformed(u8),
}

impl Message {
    pub fn encode(&self) -> Bytes {
        let mut body = BytesMut::new();
        let kind = match self {
            Message::WriteBlock { block_id, block_size, stage, targets } => {
                body.put_u64(*block_id);
                body.put_u64(*block_size);
                body.put_u8(*stage);
                body.put_u8(targets.len() as u8);
                for t in targets {
                    body.put_u32(u32::from(*t.ip()));
                    body.put_u16(t.port());
                }
                WRITE_BLOCK
            }
            Message::SetupResponse { ok } => {
                body.put_u8(u8::from(*ok));
                SETUP_RESPONSE
            }
            Message::Packet { block_id, seqno, offset, last, data } => {
                body.put_u64(*block_id);
                body.put_u32(*seqno);
                body.put_u64(*offset);
                body.put_u8(u8::from(*last));
                body.put_slice(data);
                PACKET
            }
            Message::PacketAck { seqno } => {
                body.put_u32(*seqno);
                PACKET_ACK
            }
        };
        let mut out = BytesMut::with_capacity(FRAME_HEADER_BYTES + body.len());
        out.put_u8(kind);
        out.put_u32(body.len() as u32);
        out.put_slice(&body);
        out.freeze()
    }

    fn decode_body(kind: u8, mut b: Bytes) -> Result<Message, CodecError> {
        let need = |b: &Bytes, n: usize| if b.remaining() < n { Err(CodecError::Malformed(kind)) } else { Ok(()) };
        let msg = match kind {
            WRITE_BLOCK => {
                need(&b, 18)?;
                let block_id = b.get_u64();
                let block_size = b.get_u64();
                let stage = b.get_u8();
                let n = b.get_u8() as usize;
                need(&b, n * 6)?;
                let targets = (0..n)
                    .map(|_| SocketAddrV4::new(Ipv4Addr::from(b.get_u32()), b.get_u16()))
                    .collect();
                Message::WriteBlock { block_id, block_size, stage, targets }
            }
            SETUP_RESPONSE => {
                need(&b, 1)?;
                Message::SetupResponse { ok: b.get_u8() == 1 }
            }
            PACKET => {
                need(&b, PACKET_HEADER_BYTES - FRAME_HEADER_BYTES)?;
                let block_id = b.get_u64();
                let seqno = b.get_u32();
                let offset = b.get_u64();
                let last = b.get_u8() == 1;
                Message::Packet { block_id, seqno, offset, last, data: b }
            }
            PACKET_ACK => {
                need(&b, 4)?;
                Message::PacketAck { seqno: b.get_u32() }
            }
            other => return Err(CodecError::UnknownType(other)),
        };
        Ok(msg)
    }
}

/// Reassembles messages from a byte stream. Each decoded message comes with
/// its exact wire bytes so it can be forwarded verbatim.
#[derive(Debug, Default)]
pub struct Decoder {
    buf: BytesMut,
}

impl Decoder {
    pub fn push(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn next_message(&mut self) -> Result<Option<(Message, Bytes)>, CodecError> {
        if self.buf.len() < FRAME_HEADER_BYTES {
            return Ok(None);
        }
        let kind = self.buf[0];
        let len = u32::from_be_bytes([self.buf[1], self.buf[2], self.buf[3], self.buf[4]]) as usize;
        if self.buf.len() < FRAME_HEADER_BYTES + len {
            return Ok(None);
        }
        let raw = self.buf.split_to(FRAME_HEADER_BYTES + len).freeze();
        let msg = Message::decode_body(kind, raw.slice(FRAME_HEADER_BYTES..))?;
        Ok(Some((msg, raw)))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn samples() -> Vec<Message> {
        vec![
            Message::WriteBlock {
                block_id: 9,
                block_size: 4 << 20,
                stage: 2,
                targets: vec![SocketAddrV4::new(Ipv4Addr::new(10, 0, 1, 2), 50_010)],
            },
            Message::SetupResponse { ok: true },
            Message::Packet { block_id: 9, seqno: 3, offset: 3 * 65_536, last: false, data: Bytes::from_static(b"abc") },
            Message::PacketAck { seqno: 3 },
        ]
    }

    #[test]
    fn packet_header_size_matches_encoding() {
        let m = Message::Packet { block_id: 1, seqno: 0, offset: 0, last: true, data: Bytes::from(vec![0u8; 100]) };
        assert_eq!(m.encode().len(), PACKET_HEADER_BYTES + 100);
    }

    #[test]
    fn unknown_type_is_rejected() {
        let mut d = Decoder::default();
        d.push(&[99, 0, 0, 0, 0]);
        assert_eq!(d.next_message(), Err(CodecError::UnknownType(99)));
    }

    proptest! {
        #[test]
        fn round_trip_under_any_chunking(cuts in proptest::collection::vec(1usize..40, 0..20)) {
            let msgs = samples();
            let stream: Vec<u8> = msgs.iter().flat_map(|m| m.encode().to_vec()).collect();
            let mut d = Decoder::default();
            let mut out = Vec::new();
            let mut at: usize = 0;
            for c in cuts.iter().chain(std::iter::once(&usize::MAX)) {
                let end = at.saturating_add(*c).min(stream.len());
                d.push(&stream[at..end]);
                at = end;
                while let Some((m, raw)) = d.next_message().unwrap() {
                    prop_assert_eq!(raw, m.encode());
                    out.push(m);
                }
            }
            prop_assert_eq!(out, msgs);
            prop_assert_eq!(d.buffered(), 0);
        }
    }
}
