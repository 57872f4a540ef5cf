//! Cluster file-system write path: Name Node placement, client block
//! writes, and data-node store-and-forward pipelines with hop-by-hop
//! application acknowledgements.

mod messages;
mod node;

use std::collections::BTreeSet;
use std::net::SocketAddrV4;

use bytes::Bytes;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use messages::{CodecError, Decoder, Message, FRAME_HEADER_BYTES, PACKET_HEADER_BYTES};
pub use node::{ClientApp, DataNodeApp, NodeConfig};

use crate::controller::PipelineSpec;
use crate::engine::{derive_seed, SimTime};
use crate::topology::{NodeId, Role, Topology};
use crate::transport::{ConnId, Effects, TransportError};

pub const DATA_NODE_PORT: u16 = 50_010;
pub const DEFAULT_WRITE_MAX_PACKETS: usize = 20;
pub const DEFAULT_PACKET_SIZE: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Chain,
    Mirrored,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Chain => "chain",
            Mode::Mirrored => "mirrored",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: u64,
    pub content: Bytes,
}

impl Block {
    /// Pseudo-random content reproducible from `(id, seed)`.
    pub fn generate(id: u64, size: usize, seed: u64) -> Block {
        assert!(size > 0, "block size must be positive");
        let mut content = vec![0u8; size];
        ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xB10C, id])).fill_bytes(&mut content);
        Block { id, content: Bytes::from(content) }
    }

    pub fn size(&self) -> usize {
        self.content.len()
    }

    pub fn packet_count(&self, packet_size: usize) -> usize {
        self.size().div_ceil(packet_size)
    }

    /// Splits the block into consecutive packets.
    pub fn packets(&self, packet_size: usize) -> impl Iterator<Item = Message> + '_ {
        let n = self.packet_count(packet_size);
        (0..n).map(move |i| {
            let start = i * packet_size;
            let end = (start + packet_size).min(self.size());
            Message::Packet {
                block_id: self.id,
                seqno: i as u32,
                offset: start as u64,
                last: i + 1 == n,
                data: self.content.slice(start..end),
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplicationError {
    #[error("replication factor must be at least 1")]
    ZeroReplicas,
    #[error("need {needed} eligible hosts across {racks} racks, topology offers {available}")]
    InsufficientHosts { needed: usize, racks: usize, available: usize },
    #[error("placement override names {0}, which is not an eligible host")]
    BadOverride(NodeId),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("setup rejected by the pipeline")]
    SetupRejected,
    #[error("unexpected message {0}")]
    Unexpected(&'static str),
}

/// Default placement: D_1 and D_2 share a rack, D_3 onward sit in other
/// racks, spread over distinct racks while any remain. The client's host is
/// never chosen. Deterministic under `seed`.
pub fn name_node_allocate(
    topo: &Topology,
    client: NodeId,
    block_id: u64,
    k: usize,
    seed: u64,
) -> Result<Vec<NodeId>, ReplicationError> {
    if k == 0 {
        return Err(ReplicationError::ZeroReplicas);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xA110C, block_id]));
    let racks = topo.rack_count();
    let hosts_in = |rack: usize| -> Vec<NodeId> {
        topo.hosts().filter(|n| n.rack == Some(rack) && n.id != client).map(|n| n.id).collect()
    };
    let available = topo.hosts().filter(|n| n.id != client).count();
    let insufficient = || ReplicationError::InsufficientHosts { needed: k, racks: if k >= 3 { 2 } else { 1 }, available };
    let first_size = k.min(2);
    let mut candidates: Vec<usize> = (0..racks).filter(|&r| hosts_in(r).len() >= first_size).collect();
    candidates.shuffle(&mut rng);
    for r1 in candidates {
        let mut local = hosts_in(r1);
        local.shuffle(&mut rng);
        let mut chosen: Vec<NodeId> = local[..first_size].to_vec();
        let mut remote: Vec<Vec<NodeId>> = (0..racks)
            .filter(|&r| r != r1)
            .map(|r| {
                let mut h = hosts_in(r);
                h.shuffle(&mut rng);
                h
            })
            .collect();
        remote.shuffle(&mut rng);
        // Round-robin across the other racks.
        let mut round = 0;
        while chosen.len() < k {
            let mut progressed = false;
            for rack in &remote {
                if chosen.len() < k {
                    if let Some(h) = rack.get(round) {
                        chosen.push(*h);
                        progressed = true;
                    }
                }
            }
            if !progressed {
                break;
            }
            round += 1;
        }
        if chosen.len() == k {
            return Ok(chosen);
        }
    }
    Err(insufficient())
}

/// Checks an explicit placement.
pub fn validate_placement(topo: &Topology, client: NodeId, nodes: &[NodeId]) -> Result<(), ReplicationError> {
    if nodes.is_empty() {
        return Err(ReplicationError::ZeroReplicas);
    }
    let mut seen = BTreeSet::new();
    for &n in nodes {
        if n == client || topo.role(n) != Some(Role::Host) || !seen.insert(n) {
            return Err(ReplicationError::BadOverride(n));
        }
    }
    Ok(())
}

/// Recipient of a control-plane message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Actor {
    NameNode,
    Controller,
    Host(NodeId),
}

/// Out-of-band messages between the Name Node, the controller and hosts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMsg {
    AllocateRequest { client: NodeId, block_id: u64, k: usize },
    AllocateReply { targets: Vec<SocketAddrV4> },
    /// A data node reports the established connection of hop `hop`.
    HopEstablished { hop: usize, src: SocketAddrV4, dst: SocketAddrV4 },
    /// D_1 has the whole pipeline ready and waits for mirroring.
    PipelineReady,
    NotifyController(PipelineSpec),
    MirroringInstalled,
    BlockComplete,
}

impl ControlMsg {
    pub fn name(&self) -> &'static str {
        match self {
            ControlMsg::AllocateRequest { .. } => "allocate_request",
            ControlMsg::AllocateReply { .. } => "allocate_reply",
            ControlMsg::HopEstablished { .. } => "hop_established",
            ControlMsg::PipelineReady => "pipeline_ready",
            ControlMsg::NotifyController(_) => "notify_controller",
            ControlMsg::MirroringInstalled => "mirroring_installed",
            ControlMsg::BlockComplete => "block_complete",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AppTimer {
    Persist(u32),
    Forward(u32),
}

/// Observable application milestones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppNote {
    SetupComplete,
    PacketPersisted(u32),
    /// The client received the acknowledgement for a packet.
    PacketAcked { seqno: u32, outstanding: usize },
    PacketSent { seqno: u32, outstanding: usize },
    BlockComplete,
}

/// Side effects requested by an application handler.
#[derive(Debug, Default)]
pub struct Outbox {
    pub effects: Vec<(ConnId, Effects)>,
    pub control: Vec<(Actor, ControlMsg)>,
    /// Timers as delays from the current time.
    pub timers: Vec<(SimTime, AppTimer)>,
    pub notes: Vec<AppNote>,
}
