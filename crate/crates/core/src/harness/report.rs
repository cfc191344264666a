//! Per-iteration reports, run summaries and their files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::{BackwardReport, Distribution, Flags, UpdateReport};
use crate::trace::Event;

use super::config::Mode;
use super::metrics::{effective_io_throughput, io_samples, mean, tier_busy};

/// What one worker did in one iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkerIteration {
    pub worker_id: u32,
    pub iteration: u32,
    pub forward_s: f64,
    pub backward: BackwardReport,
    /// `None` when the step was skipped because of a gradient overflow.
    pub update: Option<UpdateReport>,
    pub distribution: Distribution,
}

/// One iteration across all workers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub measured: bool,
    pub skipped_update: bool,
    pub forward_s: f64,
    pub backward_s: f64,
    pub update_s: f64,
    pub iter_s: f64,
    /// Millions of parameters updated per second of update phase.
    pub update_throughput_mps: f64,
    pub effective_io_bps: Option<f64>,
    pub read_bytes: Vec<u64>,
    pub write_bytes: Vec<u64>,
    pub grad_write_bytes: u64,
    pub host_pct: f64,
    pub tier_pct: Vec<f64>,
    pub cache_hits: usize,
    pub overflow: usize,
    pub allocation: Vec<usize>,
    pub tier_busy_s: Vec<f64>,
    pub compute_s: f64,
}

fn add_into(acc: &mut Vec<u64>, v: &[u64]) {
    if acc.len() < v.len() {
        acc.resize(v.len(), 0);
    }
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Folds per-worker results into one report per iteration. Iterations up
/// to and including `warmup` are marked as not measured.
pub fn aggregate(
    workers: &[WorkerIteration],
    events: &[Event],
    tiers: usize,
    warmup: u32,
) -> Vec<IterationReport> {
    let iterations: BTreeSet<u32> = workers.iter().map(|w| w.iteration).collect();
    iterations
        .into_iter()
        .map(|it| {
            let rows: Vec<&WorkerIteration> = workers.iter().filter(|w| w.iteration == it).collect();
            let max = |f: &dyn Fn(&WorkerIteration) -> f64| rows.iter().map(|w| f(w)).fold(0.0, f64::max);
            let forward_s = max(&|w| w.forward_s);
            let backward_s = max(&|w| w.backward.wall.as_secs_f64());
            let update_s = max(&|w| w.update.as_ref().map_or(0.0, |u| u.wall.as_secs_f64()));
            let compute_s = max(&|w| w.update.as_ref().map_or(0.0, |u| u.compute.as_secs_f64()));
            let updates: Vec<&UpdateReport> = rows.iter().filter_map(|w| w.update.as_ref()).collect();
            let params: u64 = updates.iter().map(|u| u.params_updated).sum();
            let (mut read_bytes, mut write_bytes) = (vec![0; tiers], vec![0; tiers]);
            let mut allocation = vec![0u64; tiers];
            for u in &updates {
                add_into(&mut read_bytes, &u.read_bytes);
                add_into(&mut write_bytes, &u.write_bytes);
                add_into(&mut allocation, &u.allocation.iter().map(|&c| c as u64).collect::<Vec<_>>());
            }
            let mut dist = Distribution {
                host_params: 0,
                tier_params: vec![0; tiers],
            };
            for w in &rows {
                dist.host_params += w.distribution.host_params;
                add_into(&mut dist.tier_params, &w.distribution.tier_params);
            }
            let (host_pct, tier_pct) = dist.percentages();
            let overflow = rows.iter().filter(|w| w.backward.overflow.is_some()).count()
                + updates.iter().map(|u| u.downscale_overflow).sum::<usize>();
            IterationReport {
                iteration: it,
                measured: it > warmup,
                skipped_update: rows.iter().any(|w| w.update.is_none()),
                forward_s,
                backward_s,
                update_s,
                iter_s: forward_s + backward_s + update_s,
                update_throughput_mps: if update_s > 0.0 {
                    params as f64 / update_s / 1e6
                } else {
                    0.0
                },
                effective_io_bps: effective_io_throughput(&io_samples(events, it)),
                read_bytes,
                write_bytes,
                grad_write_bytes: rows.iter().map(|w| w.backward.grad_write_bytes).sum(),
                host_pct,
                tier_pct,
                cache_hits: updates.iter().map(|u| u.cache_hits).sum(),
                overflow,
                allocation: allocation.into_iter().map(|c| c as usize).collect(),
                tier_busy_s: tier_busy(events, it, tiers)
                    .iter()
                    .map(|d| d.as_secs_f64())
                    .collect(),
                compute_s,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub mode: Mode,
    pub flags: Flags,
    pub workers: u32,
    pub iterations: u32,
    pub warmup_iterations: u32,
    pub measured_iterations: usize,
    pub mean_iter_s: f64,
    pub mean_forward_s: f64,
    pub mean_backward_s: f64,
    pub mean_update_s: f64,
    pub mean_update_throughput_mps: f64,
    pub mean_effective_io_bps: Option<f64>,
    /// Baseline iteration time over this run's, when a baseline was given.
    pub speedup_vs_baseline: Option<f64>,
    pub update_speedup_vs_baseline: Option<f64>,
}

impl Summary {
    pub fn new(
        label: impl Into<String>,
        mode: Mode,
        flags: Flags,
        workers: u32,
        warmup_iterations: u32,
        reports: &[IterationReport],
    ) -> Self {
        let measured: Vec<&IterationReport> = reports.iter().filter(|r| r.measured).collect();
        let avg = |f: fn(&IterationReport) -> f64| mean(measured.iter().map(|r| f(r))).unwrap_or(0.0);
        Self {
            label: label.into(),
            mode,
            flags,
            workers,
            iterations: reports.len() as u32,
            warmup_iterations,
            measured_iterations: measured.len(),
            mean_iter_s: avg(|r| r.iter_s),
            mean_forward_s: avg(|r| r.forward_s),
            mean_backward_s: avg(|r| r.backward_s),
            mean_update_s: avg(|r| r.update_s),
            mean_update_throughput_mps: avg(|r| r.update_throughput_mps),
            mean_effective_io_bps: mean(measured.iter().filter_map(|r| r.effective_io_bps)),
            speedup_vs_baseline: None,
            update_speedup_vs_baseline: None,
        }
    }

    /// Fills the speedup fields relative to `baseline`.
    pub fn with_baseline(mut self, baseline: &Summary) -> Self {
        let c = compare(&self, baseline);
        self.speedup_vs_baseline = c.speedup;
        self.update_speedup_vs_baseline = c.update_speedup;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub candidate: String,
    pub baseline: String,
    pub speedup: Option<f64>,
    pub update_speedup: Option<f64>,
}

/// How much faster `candidate` ran than `baseline`.
pub fn compare(candidate: &Summary, baseline: &Summary) -> Comparison {
    let ratio = |b: f64, c: f64| (c > 0.0 && b > 0.0).then(|| b / c);
    Comparison {
        candidate: candidate.label.clone(),
        baseline: baseline.label.clone(),
        speedup: ratio(baseline.mean_iter_s, candidate.mean_iter_s),
        update_speedup: ratio(baseline.mean_update_s, candidate.mean_update_s),
    }
}

const CSV_HEADER: &str = "iteration,measured,skipped_update,forward_s,backward_s,update_s,iter_s,\
update_throughput_mps,effective_io_bps,read_bytes,write_bytes,grad_write_bytes,host_pct,tier_pct,\
cache_hits,overflow,allocation,tier_busy_s,compute_s";

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn iterations_csv(reports: &[IterationReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.measured,
            r.skipped_update,
            r.forward_s,
            r.backward_s,
            r.update_s,
            r.iter_s,
            r.update_throughput_mps,
            r.effective_io_bps.map_or(String::new(), |v| v.to_string()),
            join(&r.read_bytes),
            join(&r.write_bytes),
            r.grad_write_bytes,
            r.host_pct,
            join(&r.tier_pct),
            r.cache_hits,
            r.overflow,
            join(&r.allocation),
            join(&r.tier_busy_s),
            r.compute_s,
        );
    }
    out
}

/// Writes `summary.json` and `iterations.csv` (one row per iteration,
/// warmups flagged) into `dir`.
pub fn emit_report(dir: &Path, summary: &Summary, reports: &[IterationReport]) -> Result<()> {
    let ctx = |what: &str| format!("{}: {what}", dir.display());
    fs::create_dir_all(dir).map_err(|e| Error::output(ctx("create"), e))?;
    let mut json = serde_json::to_string_pretty(summary).expect("summary serializes");
    json.push('\n');
    fs::write(dir.join("summary.json"), json).map_err(|e| Error::output(ctx("summary.json"), e))?;
    fs::write(dir.join("iterations.csv"), iterations_csv(reports))
        .map_err(|e| Error::output(ctx("iterations.csv"), e))?;
    let mut full = serde_json::to_string_pretty(reports).expect("reports serialize");
    full.push('\n');
    fs::write(dir.join("iterations.json"), full).map_err(|e| Error::output(ctx("iterations.json"), e))
}

/// Reads a summary from a report directory or a `summary.json` path.
pub fn load_summary(path: &Path) -> Result<Summary> {
    let file = if path.is_dir() {
        path.join("summary.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::output(file.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", file.display())))
}
