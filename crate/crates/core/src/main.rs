use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hpz_sim::config::{PolicyKind, RunConfig};
use hpz_sim::report::{
    cmd_race_hunt, cmd_run, cmd_sweep_stability, cmd_sweep_throughput, default_sizes, summarize_run,
};
use hpz_sim::zeropp::HpzMode;
use hpz_sim::Result;

#[derive(Parser)]
#[command(name = "hpz-sim", version, about = "Simulate sharded data-parallel training with hierarchical weight partitioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and report loss, verdict, hazards and throughput.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write every op of every step to trace.jsonl (needs --out).
        #[arg(long)]
        trace: bool,
    },
    /// Stability matrix: hpZ off / stock / modified for three model sizes.
    SweepStability {
        #[command(flatten)]
        common: Common,
    },
    /// Throughput table: qgZ alone vs qgZ with stock and modified hpZ.
    SweepThroughput {
        #[command(flatten)]
        common: Common,
    },
    /// Run the scheme under many random schedules and count divergences.
    RaceHunt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Key/value config file, or a previous report.json.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_hpz)]
    hpz: Option<HpzMode>,
    /// Quantize weights to int8 before gathering.
    #[arg(long)]
    qwz: bool,
    /// Exchange gradients as int4 over all-to-all.
    #[arg(long)]
    qgz: bool,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Directory for JSON/CSV artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_hpz(s: &str) -> std::result::Result<HpzMode, String> {
    s.parse().map_err(|e: hpz_sim::Error| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    s.parse().map_err(|e: hpz_sim::Error| e.to_string())
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(h) = self.hpz {
            cfg.hpz = h;
        }
        cfg.qwz |= self.qwz;
        cfg.qgz |= self.qgz;
        if let Some(p) = self.policy {
            cfg.policy = p;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.steps = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `Ok(true)` when everything expected to be stable was.
fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { common, trace } => {
            let cfg = common.config()?;
            if trace && common.out.is_none() {
                eprintln!("--trace needs --out; no trace written");
            }
            let report = cmd_run(&cfg, common.out.as_deref(), trace)?;
            print!("{}", summarize_run(&report));
            Ok(report.is_stable() || !cfg.expected_stable())
        }
        Command::SweepStability { common } => {
            let cfg = common.config()?;
            let matrix = cmd_sweep_stability(&cfg, &default_sizes(&cfg))?;
            print!("{}", matrix.to_text());
            if let Some(dir) = &common.out {
                matrix.write(dir)?;
            }
            let bad = matrix.unexpected();
            for b in &bad {
                eprintln!("unexpected: {b}");
            }
            Ok(bad.is_empty())
        }
        Command::SweepThroughput { common } => {
            let cfg = common.config()?;
            let table = cmd_sweep_throughput(&cfg)?;
            print!("{}", table.to_text());
            if let Some(dir) = &common.out {
                table.write(dir)?;
            }
            let bad = table.unexpected();
            for b in &bad {
                eprintln!("unexpected: {b}");
            }
            Ok(bad.is_empty())
        }
        Command::RaceHunt { common, trials } => {
            let cfg = common.config()?;
            let hunt = cmd_race_hunt(&cfg, trials)?;
            print!("{}", hunt.to_text());
            if let Some(dir) = &common.out {
                hunt.write(dir)?;
            }
            Ok(cfg.hpz == HpzMode::Stock || hunt.diverged == 0)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
