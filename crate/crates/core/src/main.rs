use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mrsim::analysis::{self, ClientClass, ModeRun, ModeSelect, ScenarioConfig, ScenarioError};

#[derive(Parser)]
#[command(name = "mrsim", version, about = "Chain vs. switch-mirrored block replication simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print a CSV row per mode.
    Simulate(RunArgs),
    /// Print mean analytic saving ratios per client class.
    Analytic {
        #[arg(long, default_value_t = 2)]
        k_min: usize,
        #[arg(long, default_value_t = 5)]
        k_max: usize,
    },
    /// Run both modes over a range of replication factors.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 2)]
        k_min: usize,
        #[arg(long, default_value_t = 5)]
        k_max: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ModeSelect>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    loss: Option<f64>,
    #[arg(long)]
    block_size: Option<usize>,
    /// Write the event trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<ModeSelect, String> {
    match s {
        "chain" => Ok(ModeSelect::Chain),
        "mirrored" => Ok(ModeSelect::Mirrored),
        "both" => Ok(ModeSelect::Both),
        _ => Err(format!("expected chain, mirrored or both, got {s:?}")),
    }
}

enum Failure {
    Config(String),
    Assertion(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Assertion(e.to_string())
        }
    }
}

fn load(args: &RunArgs) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => ScenarioConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => ScenarioConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.replication.mode = m;
    }
    if let Some(k) = args.k {
        cfg.replication.k = k;
    }
    if let Some(s) = args.seed {
        cfg.engine.seed = s;
    }
    if let Some(l) = args.loss {
        cfg.topology.loss = l;
    }
    if let Some(b) = args.block_size {
        cfg.replication.block_size = b;
    }
    cfg.engine.trace = args.trace.is_some();
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn check(runs: &[ModeRun]) -> Result<(), Failure> {
    for r in runs {
        let m = &r.metrics;
        if !m.replicas_match_source() {
            return Err(Failure::Assertion(format!("{} k={}: replicas differ from the source block", m.mode.as_str(), m.k)));
        }
    }
    Ok(())
}

fn io_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn output(args: &RunArgs, runs: &[ModeRun]) -> Result<(), Failure> {
    if let Some(path) = &args.trace {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        for r in runs {
            writeln!(f, "# run mode={} k={} seed={}", r.metrics.mode.as_str(), r.metrics.k, r.metrics.seed).map_err(io_err)?;
            for line in &r.metrics.trace {
                writeln!(f, "{line}").map_err(io_err)?;
            }
        }
        f.flush().map_err(io_err)?;
    }
    match &args.out {
        Some(p) => analysis::emit_csv(runs, p)?,
        None => analysis::write_csv(runs, std::io::stdout().lock())?,
    }
    check(runs)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = load(&args)?;
            eprintln!("seed={}", cfg.engine.seed);
            let runs = analysis::run_scenario(&cfg)?;
            output(&args, &runs)
        }
        Command::Sweep { run, k_min, k_max } => {
            if k_min == 0 || k_min > k_max {
                return Err(Failure::Config(format!("invalid k range {k_min}..={k_max}")));
            }
            let cfg = load(&run)?;
            eprintln!("seed={}", cfg.engine.seed);
            let runs = analysis::sweep(&cfg, k_min..=k_max)?;
            output(&run, &runs)
        }
        Command::Analytic { k_min, k_max } => {
            if k_min == 0 || k_min > k_max {
                return Err(Failure::Config(format!("invalid k range {k_min}..={k_max}")));
            }
            let mut out = std::io::stdout().lock();
            writeln!(out, "k,class,mean_saving_ratio").map_err(io_err)?;
            for k in k_min..=k_max {
                for c in ClientClass::ALL {
                    writeln!(out, "{k},{},{:.6}", c.as_str(), analysis::enumerate_average_savings(k, c)).map_err(io_err)?;
                }
                writeln!(out, "{k},pooled,{:.6}", analysis::pooled_average_savings(k)).map_err(io_err)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Assertion(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
