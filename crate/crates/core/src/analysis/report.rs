use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::config::{ConfigError, ScenarioConfig};
use super::{AnalysisError, PlacementCase};
use crate::replication::Mode;
use crate::sim::{self, RunMetrics, SimError};

pub const CSV_HEADER: &str =
    "scenario,mode,k,data_time_ns,total_time_ns,payload_link_traversals,acks_bytes,retx_count,early_ack_count,saving_ratio";

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{mode} k={k}: {source}")]
    Sim { mode: &'static str, k: usize, source: SimError },
    #[error("placement analysis: {0}")]
    Analysis(#[from] AnalysisError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl ScenarioError {
    /// Errors caused by the scenario description rather than the run.
    pub fn is_config(&self) -> bool {
        match self {
            ScenarioError::Config(_) => true,
            ScenarioError::Sim { source, .. } => matches!(source, SimError::Config(_) | SimError::Placement(_) | SimError::Topology(_)),
            _ => false,
        }
    }
}

/// One simulated run with its analytic counterpart.
#[derive(Debug, Clone)]
pub struct ModeRun {
    pub scenario: String,
    pub metrics: RunMetrics,
    pub case: PlacementCase,
}

impl ModeRun {
    pub fn row(&self) -> CsvRow {
        let m = &self.metrics;
        CsvRow {
            scenario: self.scenario.clone(),
            mode: m.mode.as_str(),
            k: m.k,
            data_time_ns: m.data_time.as_nanos(),
            total_time_ns: m.total_time.as_nanos(),
            payload_link_traversals: m.payload_link_traversals(),
            acks_bytes: m.ack_bytes(),
            retx_count: m.retransmitted_segments(),
            early_ack_count: m.early_acks_stored(),
            saving_ratio: match m.mode {
                Mode::Chain => "0".to_string(),
                Mode::Mirrored => self.case.saving_ratio().map_or_else(|| "na".to_string(), |r| format!("{r:.6}")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CsvRow {
    pub scenario: String,
    pub mode: &'static str,
    pub k: usize,
    pub data_time_ns: u64,
    pub total_time_ns: u64,
    pub payload_link_traversals: u64,
    pub acks_bytes: u64,
    pub retx_count: u64,
    pub early_ack_count: u64,
    /// Analytic ratio of the placement for mirrored rows, 0 for chain rows.
    pub saving_ratio: String,
}

fn run_one(cfg: &ScenarioConfig, mode: Mode, k: usize) -> Result<ModeRun, ScenarioError> {
    let sim_cfg = cfg.to_sim(mode, k)?;
    let metrics = sim::run(&sim_cfg).map_err(|source| ScenarioError::Sim { mode: mode.as_str(), k, source })?;
    let (topo, client) = sim::topology_for(&sim_cfg).map_err(|source| ScenarioError::Sim { mode: mode.as_str(), k, source })?;
    let case = PlacementCase::from_topology(&topo, client, &metrics.data_nodes)?;
    Ok(ModeRun { scenario: cfg.name.clone(), metrics, case })
}

/// Runs the configured modes at the configured replication factor.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<ModeRun>, ScenarioError> {
    cfg.validate()?;
    cfg.replication.mode.modes().into_iter().map(|m| run_one(cfg, m, cfg.replication.k)).collect()
}

/// Runs every `k` in the range under both modes, one thread per run.
/// Results come back ordered by `(k, mode)`.
pub fn sweep(cfg: &ScenarioConfig, ks: std::ops::RangeInclusive<usize>) -> Result<Vec<ModeRun>, ScenarioError> {
    cfg.validate()?;
    let jobs: Vec<(usize, Mode)> = ks.flat_map(|k| [(k, Mode::Chain), (k, Mode::Mirrored)]).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.iter().map(|&(k, m)| s.spawn(move || run_one(cfg, m, k))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

pub fn write_csv<W: Write>(runs: &[ModeRun], out: W) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    for r in runs {
        w.serialize(r.row())?;
    }
    w.flush().map_err(|source| ScenarioError::Io { path: "<stream>".into(), source })?;
    Ok(())
}

pub fn emit_csv(runs: &[ModeRun], path: &Path) -> Result<(), ScenarioError> {
    let io = |source| ScenarioError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::create(path).map_err(io)?;
    write_csv(runs, std::io::BufWriter::new(file))
}
