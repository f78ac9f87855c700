//! Experiment commands and their JSON/CSV/text artifacts.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PolicyKind, RunConfig};
use crate::error::{Error, Result};
use crate::sim::{simulate, RunReport};
use crate::trainer::Verdict;
use crate::zeropp::{HpzMode, LayerDesc};

pub const LOSS_CSV_HEADER: &str = "step,loss,step_time_s,inter_bytes,intra_bytes";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_loss_csv(report: &RunReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in &report.steps {
        w.serialize(s).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Single simulation. With `out`, writes `report.json`, `loss.csv` and, when
/// `trace` is set, `trace.jsonl`.
pub fn cmd_run(cfg: &RunConfig, out: Option<&Path>, trace: bool) -> Result<RunReport> {
    let Some(dir) = out else {
        return simulate(cfg, None);
    };
    fs::create_dir_all(dir)?;
    let report = if trace {
        let mut w = BufWriter::new(File::create(dir.join("trace.jsonl"))?);
        let mut r = simulate(cfg, Some(&mut w))?;
        w.flush()?;
        r.trace_path = Some("trace.jsonl".into());
        r
    } else {
        simulate(cfg, None)?
    };
    write_json(&dir.join("report.json"), &report)?;
    write_loss_csv(&report, File::create(dir.join("loss.csv"))?)?;
    Ok(report)
}

pub fn summarize_run(r: &RunReport) -> String {
    let last = r.steps.last().map_or(f64::NAN, |s| s.loss);
    format!(
        "verdict: {}\nhazards: {}\nloss: {:.6e} -> {:.6e} over {} steps\ntokens/s/node: {:.1}\nbackward-gather inter-node bytes: {}\n",
        verdict_label(&r.verdict),
        r.hazard_count,
        r.steps[0].loss,
        last,
        r.steps.len(),
        r.tokens_per_sec_per_node,
        r.backward_gather_inter_bytes
    )
}

pub fn verdict_label(v: &Verdict) -> String {
    match v {
        Verdict::Stable => "stable".into(),
        Verdict::Nan { step } => format!("NaN at step {step}"),
        Verdict::Stagnant { window } => format!("stagnant over {window} steps"),
    }
}

fn mark(v: &Verdict) -> &'static str {
    if *v == Verdict::Stable {
        "✓"
    } else {
        "×"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub dims: Vec<usize>,
    pub params: usize,
    pub off: Verdict,
    pub stock: Verdict,
    pub fixed: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityMatrix {
    pub config: RunConfig,
    pub rows: Vec<StabilityRow>,
}

/// The base model plus hidden layers two and four times as wide.
pub fn default_sizes(base: &RunConfig) -> Vec<Vec<usize>> {
    let last = base.dims.len() - 1;
    [1, 2, 4]
        .iter()
        .map(|&k| base.dims.iter().enumerate().map(|(i, &d)| if i == 0 || i == last { d } else { d * k }).collect())
        .collect()
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| LayerDesc { in_dim: w[0], out_dim: w[1] }.elems()).sum()
}

/// Off / Stock / Fixed for every model size, run in parallel.
pub fn cmd_sweep_stability(base: &RunConfig, sizes: &[Vec<usize>]) -> Result<StabilityMatrix> {
    let modes = [HpzMode::Off, HpzMode::Stock, HpzMode::Fixed];
    let jobs: Vec<RunConfig> = sizes
        .iter()
        .flat_map(|dims| {
            modes.iter().map(move |&hpz| RunConfig { hpz, dims: dims.clone(), layers: None, layer_elems: None, ..base.clone() })
        })
        .collect();
    let verdicts = jobs.par_iter().map(|c| simulate(c, None).map(|r| r.verdict)).collect::<Result<Vec<_>>>()?;
    let rows = sizes
        .iter()
        .zip(verdicts.chunks(3))
        .map(|(dims, v)| StabilityRow { dims: dims.clone(), params: param_count(dims), off: v[0], stock: v[1], fixed: v[2] })
        .collect();
    Ok(StabilityMatrix { config: base.clone(), rows })
}

impl StabilityMatrix {
    /// Cells that should be stable but are not.
    pub fn unexpected(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for row in &self.rows {
            let name = dims_label(&row.dims);
            if row.off != Verdict::Stable {
                bad.push(format!("{name}: hpZ off {}", verdict_label(&row.off)));
            }
            if row.fixed != Verdict::Stable {
                bad.push(format!("{name}: modified hpZ {}", verdict_label(&row.fixed)));
            }
            if self.config.policy == PolicyKind::ProgramOrder && row.stock != Verdict::Stable {
                bad.push(format!("{name}: hpZ under program order {}", verdict_label(&row.stock)));
            }
        }
        bad
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,params,without_hpz,with_hpz,modified_hpz\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", dims_label(&r.dims), r.params, mark(&r.off), mark(&r.stock), mark(&r.fixed));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<20} {:>8}  {:^11}  {:^8}  {:^12}\n", "model", "params", "without hpZ", "with hpZ", "modified hpZ");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>8}  {:^11}  {:^8}  {:^12}",
                dims_label(&r.dims),
                r.params,
                mark(&r.off),
                mark(&r.stock),
                mark(&r.fixed)
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("stability.json"), self)?;
        fs::write(dir.join("stability.csv"), self.to_csv())?;
        fs::write(dir.join("stability.txt"), self.to_text())?;
        Ok(())
    }
}

fn dims_label(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub label: String,
    pub hpz: HpzMode,
    pub policy: PolicyKind,
    pub verdict: Verdict,
    pub mean_step_time_s: f64,
    pub tokens_per_sec_per_node: f64,
    /// Relative to the first row.
    pub speedup_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputTable {
    pub config: RunConfig,
    pub rows: Vec<ThroughputRow>,
    pub notes: Vec<String>,
}

/// qgZ alone, qgZ with stock hpZ (program order, so the race never fires and
/// the run has a meaningful step time) and qgZ with modified hpZ.
pub fn cmd_sweep_throughput(base: &RunConfig) -> Result<ThroughputTable> {
    let jobs = [
        ("qgZ", HpzMode::Off, base.policy),
        ("qgZ + hpZ", HpzMode::Stock, PolicyKind::ProgramOrder),
        ("qgZ + modified hpZ", HpzMode::Fixed, base.policy),
    ];
    let reports = jobs
        .par_iter()
        .map(|&(_, hpz, policy)| simulate(&RunConfig { hpz, policy, qgz: true, ..base.clone() }, None))
        .collect::<Result<Vec<_>>>()?;
    let baseline = reports[0].tokens_per_sec_per_node;
    let rows = jobs
        .iter()
        .zip(&reports)
        .map(|(&(label, hpz, policy), r)| ThroughputRow {
            label: label.into(),
            hpz,
            policy,
            verdict: r.verdict,
            mean_step_time_s: r.mean_step_time_s,
            tokens_per_sec_per_node: r.tokens_per_sec_per_node,
            speedup_pct: (r.tokens_per_sec_per_node / baseline - 1.0) * 100.0,
        })
        .collect();
    let notes = vec!["stock hpZ throughput is measured under program order; a run that diverges to NaN has no meaningful throughput".into()];
    Ok(ThroughputTable { config: base.clone(), rows, notes })
}

impl ThroughputTable {
    pub fn row(&self, hpz: HpzMode) -> &ThroughputRow {
        self.rows.iter().find(|r| r.hpz == hpz).expect("all modes present")
    }

    pub fn unexpected(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter(|r| r.verdict != Verdict::Stable)
            .map(|r| format!("{}: {}", r.label, verdict_label(&r.verdict)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,tokens_per_sec_per_node,mean_step_time_s,speedup_pct\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.label, r.tokens_per_sec_per_node, r.mean_step_time_s, r.speedup_pct);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {}", "", self.rows.iter().map(|r| format!("{:>20}", r.label)).collect::<String>());
        let cells: String = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if i == 0 {
                    format!("{:>20.1}", r.tokens_per_sec_per_node)
                } else {
                    format!("{:>20}", format!("{:.1} ({:+.0}%)", r.tokens_per_sec_per_node, r.speedup_pct))
                }
            })
            .collect();
        let _ = writeln!(s, "{:<16} {cells}", "tokens/s/node");
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("throughput.json"), self)?;
        fs::write(dir.join("throughput.csv"), self.to_csv())?;
        fs::write(dir.join("throughput.txt"), self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub verdict: Verdict,
    pub hazard_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceHuntReport {
    pub config: RunConfig,
    pub trials: usize,
    pub diverged: usize,
    pub manifestation_fraction: f64,
    /// Static hazard count; `None` if it varied between trials.
    pub hazard_count: Option<usize>,
    pub outcomes: Vec<TrialOutcome>,
}

/// Runs the base scheme under seeded random schedules, seeds `seed..seed+trials`.
pub fn cmd_race_hunt(base: &RunConfig, trials: usize) -> Result<RaceHuntReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("race hunt needs at least one trial".into()));
    }
    let outcomes = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let seed = base.seed.wrapping_add(k);
            let r = simulate(&RunConfig { seed, policy: PolicyKind::Random, ..base.clone() }, None)?;
            Ok(TrialOutcome { seed, verdict: r.verdict, hazard_count: r.hazard_count })
        })
        .collect::<Result<Vec<_>>>()?;
    let diverged = outcomes.iter().filter(|o| o.verdict != Verdict::Stable).count();
    let first = outcomes[0].hazard_count;
    let hazard_count = outcomes.iter().all(|o| o.hazard_count == first).then_some(first);
    Ok(RaceHuntReport {
        config: RunConfig { policy: PolicyKind::Random, ..base.clone() },
        trials,
        diverged,
        manifestation_fraction: diverged as f64 / trials as f64,
        hazard_count,
        outcomes,
    })
}

impl RaceHuntReport {
    pub fn to_text(&self) -> String {
        format!(
            "scheme: {:?}\ntrials: {}\ndiverged: {} ({:.1}%)\nstatic hazards: {}\n",
            self.config.hpz,
            self.trials,
            self.diverged,
            self.manifestation_fraction * 100.0,
            self.hazard_count.map_or("varies".to_string(), |h| h.to_string())
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("race_hunt.json"), self)?;
        let mut csv = String::from("seed,verdict,hazard_count\n");
        for o in &self.outcomes {
            let _ = writeln!(csv, "{},{},{}", o.seed, verdict_label(&o.verdict), o.hazard_count);
        }
        fs::write(dir.join("race_hunt.csv"), csv)?;
        fs::write(dir.join("race_hunt.txt"), self.to_text())?;
        Ok(())
    }
}
