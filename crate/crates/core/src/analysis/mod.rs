//! Link-count traffic model, placement-case enumeration, scenario files and
//! CSV reporting.

mod config;
mod report;

pub use config::{ClientSpec, ConfigError, EngineSection, ModeSelect, ReplicationSection, ScenarioConfig, TopologySection, TransportSection};
pub use report::{emit_csv, run_scenario, sweep, write_csv, CsvRow, ModeRun, ScenarioError, CSV_HEADER};

use crate::engine::Direction;
use crate::topology::{LinkId, NodeId, Role, Topology, TopologyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClientClass {
    /// Outside the data center; its own links are not counted.
    Outside,
    /// On the same server as D_1.
    CoServer,
    /// In D_1's rack.
    CoRack,
    /// In another rack.
    CrossRack,
}

impl ClientClass {
    pub const ALL: [ClientClass; 4] = [ClientClass::Outside, ClientClass::CoServer, ClientClass::CoRack, ClientClass::CrossRack];

    pub fn as_str(self) -> &'static str {
        match self {
            ClientClass::Outside => "outside",
            ClientClass::CoServer => "co-server",
            ClientClass::CoRack => "co-rack",
            ClientClass::CrossRack => "cross-rack",
        }
    }

    /// Admissible (ascending, descending) counts for the client's hop.
    fn first_hop_options(self) -> &'static [(u32, u32)] {
        match self {
            ClientClass::Outside => &[(0, 3)],
            ClientClass::CoServer => &[(0, 0)],
            ClientClass::CoRack => &[(1, 1)],
            ClientClass::CrossRack => &[(2, 2), (3, 3)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("a placement needs at least one data node")]
    Empty,
    #[error("ascending and descending lists differ in length")]
    LengthMismatch,
    #[error("hop {hop} with {asc} ascending / {desc} descending links is inconsistent with class {class}")]
    InvalidHop { hop: usize, asc: u32, desc: u32, class: &'static str },
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
}

/// Per-hop link counts of one pipeline. Hop `j` runs from D_j to D_{j+1},
/// with the client as D_0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementCase {
    pub class: ClientClass,
    pub asc: Vec<u32>,
    pub desc: Vec<u32>,
}

impl PlacementCase {
    pub fn new(class: ClientClass, asc: Vec<u32>, desc: Vec<u32>) -> Result<PlacementCase, AnalysisError> {
        if asc.is_empty() {
            return Err(AnalysisError::Empty);
        }
        if asc.len() != desc.len() {
            return Err(AnalysisError::LengthMismatch);
        }
        for (hop, (&a, &d)) in asc.iter().zip(&desc).enumerate() {
            let ok = if hop == 0 { class.first_hop_options().contains(&(a, d)) } else { a == d && (1..=3).contains(&a) };
            if !ok {
                return Err(AnalysisError::InvalidHop { hop, asc: a, desc: d, class: class.as_str() });
            }
        }
        Ok(PlacementCase { class, asc, desc })
    }

    pub fn k(&self) -> usize {
        self.asc.len()
    }

    /// In-DC links traversed by the chain.
    pub fn l_total(&self) -> u32 {
        self.asc.iter().chain(&self.desc).sum()
    }

    /// Ascending links removed by mirroring. A co-server client leaves
    /// D_1 as the source of hop 1, so that ascent stays.
    pub fn eliminated(&self) -> u32 {
        let first = if self.class == ClientClass::CoServer { 2 } else { 1 };
        self.asc.iter().skip(first).sum()
    }

    /// `None` when the chain crosses no link.
    pub fn saving_ratio(&self) -> Option<f64> {
        match self.l_total() {
            0 => None,
            l => Some(f64::from(self.eliminated()) / f64::from(l)),
        }
    }

    /// Reads the case off a concrete topology.
    pub fn from_topology(topo: &Topology, client: NodeId, data_nodes: &[NodeId]) -> Result<PlacementCase, AnalysisError> {
        let d1 = *data_nodes.first().ok_or(AnalysisError::Empty)?;
        let class = if topo.role(client) == Some(Role::External) {
            ClientClass::Outside
        } else if client == d1 {
            ClientClass::CoServer
        } else if topo.rack_of(client).is_some() && topo.rack_of(client) == topo.rack_of(d1) {
            ClientClass::CoRack
        } else {
            ClientClass::CrossRack
        };
        let k = data_nodes.len();
        let (mut asc, mut desc) = (vec![0; k], vec![0; k]);
        for t in chain_traversals(topo, client, data_nodes)? {
            if t.external {
                continue;
            }
            if t.ascending {
                asc[t.hop] += 1;
            } else {
                desc[t.hop] += 1;
            }
        }
        PlacementCase::new(class, asc, desc)
    }
}

/// All cases of a class with `k` data nodes: later hops take 1, 2 or 3
/// links each way.
pub fn enumerate_cases(k: usize, class: ClientClass) -> Vec<PlacementCase> {
    assert!(k >= 1, "k must be at least 1");
    let mut out = Vec::new();
    for &(a0, d0) in class.first_hop_options() {
        let combos = 3usize.pow(k as u32 - 1);
        for mut c in 0..combos {
            let (mut asc, mut desc) = (vec![a0], vec![d0]);
            for _ in 1..k {
                let a = (c % 3) as u32 + 1;
                c /= 3;
                asc.push(a);
                desc.push(a);
            }
            out.push(PlacementCase { class, asc, desc });
        }
    }
    out
}

/// Uniform mean saving ratio over the cases of one class. Cases with no
/// links at all count as zero.
pub fn enumerate_average_savings(k: usize, class: ClientClass) -> f64 {
    let cases = enumerate_cases(k, class);
    let sum: f64 = cases.iter().map(|c| c.saving_ratio().unwrap_or(0.0)).sum();
    sum / cases.len() as f64
}

/// Mean of the four class means.
pub fn pooled_average_savings(k: usize) -> f64 {
    ClientClass::ALL.iter().map(|&c| enumerate_average_savings(k, c)).sum::<f64>() / ClientClass::ALL.len() as f64
}

/// One link traversal of the chain, numbered from 1 in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Traversal {
    pub number: usize,
    pub hop: usize,
    pub link: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    pub ascending: bool,
    pub external: bool,
}

/// Every link the chain's data crosses: client to D_1, then D_j to D_{j+1}.
pub fn chain_traversals(topo: &Topology, client: NodeId, data_nodes: &[NodeId]) -> Result<Vec<Traversal>, TopologyError> {
    let mut out = Vec::new();
    let mut src = client;
    for (hop, &dst) in data_nodes.iter().enumerate() {
        let nodes = topo.path_nodes(src, dst)?;
        let links = topo.shortest_path(src, dst)?;
        for (w, &lid) in nodes.windows(2).zip(&links) {
            let link = topo.link(lid);
            out.push(Traversal {
                number: out.len() + 1,
                hop,
                link: lid,
                from: w[0],
                to: w[1],
                ascending: link.direction_from(w[0]) == Some(Direction::BtoA),
                external: link.external,
            });
        }
        src = dst;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
