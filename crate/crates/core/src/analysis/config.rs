use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::replication::{Mode, DEFAULT_PACKET_SIZE, DEFAULT_WRITE_MAX_PACKETS};
use crate::sim::{ClientPlacement, SimConfig};
use crate::topology::{LinkParams, NodeId, ThreeLayerShape, Topology};
use crate::transport::TransportConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelect {
    Chain,
    Mirrored,
    Both,
}

impl ModeSelect {
    pub fn modes(self) -> Vec<Mode> {
        match self {
            ModeSelect::Chain => vec![Mode::Chain],
            ModeSelect::Mirrored => vec![Mode::Mirrored],
            ModeSelect::Both => vec![Mode::Chain, Mode::Mirrored],
        }
    }
}

/// `"outside"`, or the 0-based index of a host in build order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClientSpec {
    Host(usize),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    pub cores: usize,
    pub aggs_per_core: usize,
    pub racks_per_agg: usize,
    pub hosts_per_rack: usize,
    pub link_delay_us: u64,
    /// Bits per second.
    pub link_bandwidth_bps: u64,
    /// Per-link, per-direction drop probability.
    pub loss: f64,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            cores: 1,
            aggs_per_core: 2,
            racks_per_agg: 2,
            hosts_per_rack: 4,
            link_delay_us: 10,
            link_bandwidth_bps: 1_000_000_000,
            loss: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicationSection {
    pub k: usize,
    pub mode: ModeSelect,
    pub block_id: u64,
    pub block_size: usize,
    pub packet_size: usize,
    pub write_max_packets: usize,
    pub client: ClientSpec,
    /// Host indices for D_1.. in order; the first k are used.
    pub placement: Option<Vec<usize>>,
    pub persist_delay_us: u64,
    pub forward_delay_us: u64,
}

impl Default for ReplicationSection {
    fn default() -> Self {
        ReplicationSection {
            k: 3,
            mode: ModeSelect::Both,
            block_id: 1,
            block_size: 4 << 20,
            packet_size: DEFAULT_PACKET_SIZE,
            write_max_packets: DEFAULT_WRITE_MAX_PACKETS,
            client: ClientSpec::Named("outside".into()),
            placement: None,
            persist_delay_us: 0,
            forward_delay_us: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    pub mss: usize,
    pub rto_initial_ms: u64,
    pub rto_max_ms: u64,
    /// Defaults to write_max_packets * packet_size.
    pub rcv_buffer: Option<u64>,
    pub dupack_threshold: u32,
}

impl Default for TransportSection {
    fn default() -> Self {
        let t = TransportConfig::default();
        TransportSection {
            mss: t.mss,
            rto_initial_ms: t.rto_initial.as_nanos() / 1_000_000,
            rto_max_ms: t.rto_max.as_nanos() / 1_000_000,
            rcv_buffer: None,
            dupack_threshold: t.dupack_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub seed: u64,
    pub seg_proc_us: u64,
    pub control_delay_us: u64,
    pub install_delay_us: u64,
    pub max_time_ms: u64,
    pub trace: bool,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection { seed: 1, seg_proc_us: 5, control_delay_us: 50, install_delay_us: 0, max_time_ms: 600_000, trace: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub topology: TopologySection,
    pub replication: ReplicationSection,
    pub transport: TransportSection,
    pub engine: EngineSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "default".into(),
            topology: TopologySection::default(),
            replication: ReplicationSection::default(),
            transport: TransportSection::default(),
            engine: EngineSection::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<ScenarioConfig, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<ScenarioConfig, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        ScenarioConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        let positive = [
            ("topology.cores", t.cores as u64),
            ("topology.aggs_per_core", t.aggs_per_core as u64),
            ("topology.racks_per_agg", t.racks_per_agg as u64),
            ("topology.hosts_per_rack", t.hosts_per_rack as u64),
            ("topology.link_bandwidth_bps", t.link_bandwidth_bps / 8),
            ("replication.k", self.replication.k as u64),
            ("replication.block_size", self.replication.block_size as u64),
            ("replication.packet_size", self.replication.packet_size as u64),
            ("replication.write_max_packets", self.replication.write_max_packets as u64),
            ("transport.mss", self.transport.mss as u64),
            ("transport.rto_initial_ms", self.transport.rto_initial_ms),
            ("transport.dupack_threshold", u64::from(self.transport.dupack_threshold)),
            ("engine.max_time_ms", self.engine.max_time_ms),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if self.transport.rto_max_ms < self.transport.rto_initial_ms {
            return Err(invalid("transport.rto_max_ms", "below rto_initial_ms"));
        }
        if !(0.0..1.0).contains(&t.loss) {
            return Err(invalid("topology.loss", format!("{} outside [0, 1)", t.loss)));
        }
        if self.transport.rcv_buffer == Some(0) {
            return Err(invalid("transport.rcv_buffer", "must be positive"));
        }
        if let ClientSpec::Named(s) = &self.replication.client {
            if s != "outside" {
                return Err(invalid("replication.client", format!("expected \"outside\" or a host index, got {s:?}")));
            }
        }
        if let Some(p) = &self.replication.placement {
            if p.len() < self.replication.k {
                return Err(invalid("replication.placement", format!("{} hosts listed for k = {}", p.len(), self.replication.k)));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> ThreeLayerShape {
        let t = &self.topology;
        ThreeLayerShape::new(t.cores, t.aggs_per_core, t.racks_per_agg, t.hosts_per_rack)
    }

    /// Simulation parameters for one mode and replication factor.
    pub fn to_sim(&self, mode: Mode, k: usize) -> Result<SimConfig, ConfigError> {
        self.validate()?;
        let r = &self.replication;
        if let Some(p) = &r.placement {
            if p.len() < k {
                return Err(invalid("replication.placement", format!("{} hosts listed for k = {k}", p.len())));
            }
        }
        let link = LinkParams { delay: SimTime::from_micros(self.topology.link_delay_us), bandwidth: self.topology.link_bandwidth_bps / 8 };
        let topo = Topology::build_three_layer(self.shape(), link).map_err(|e| invalid("topology", e.to_string()))?;
        let hosts: Vec<NodeId> = topo.hosts().map(|n| n.id).collect();
        let host = |key: &'static str, i: usize| {
            hosts.get(i).copied().ok_or_else(|| invalid(key, format!("host index {i} out of range (0..{})", hosts.len())))
        };
        let client = match &r.client {
            ClientSpec::Host(i) => ClientPlacement::Host(host("replication.client", *i)?),
            ClientSpec::Named(_) => ClientPlacement::Outside,
        };
        let placement = match &r.placement {
            Some(p) => Some(p[..k].iter().map(|&i| host("replication.placement", i)).collect::<Result<Vec<_>, _>>()?),
            None => None,
        };
        let tr = &self.transport;
        let e = &self.engine;
        Ok(SimConfig {
            shape: self.shape(),
            link,
            loss: self.topology.loss,
            seed: e.seed,
            mode,
            k,
            block_id: r.block_id,
            block_size: r.block_size,
            packet_size: r.packet_size,
            write_max_packets: r.write_max_packets,
            persist_delay: SimTime::from_micros(r.persist_delay_us),
            forward_delay: SimTime::from_micros(r.forward_delay_us),
            transport: TransportConfig {
                mss: tr.mss,
                rto_initial: SimTime::from_millis(tr.rto_initial_ms),
                rto_max: SimTime::from_millis(tr.rto_max_ms),
                rcv_buffer: tr.rcv_buffer.unwrap_or((r.write_max_packets * r.packet_size) as u64),
                dupack_threshold: tr.dupack_threshold,
                mr_enabled: false,
            },
            seg_proc: SimTime::from_micros(e.seg_proc_us),
            control_delay: SimTime::from_micros(e.control_delay_us),
            install_delay: SimTime::from_micros(e.install_delay_us),
            client,
            placement,
            trace: e.trace,
            max_time: SimTime::from_millis(e.max_time_ms),
            drop_rules: Vec::new(),
            teardown_at: None,
        })
    }
}
