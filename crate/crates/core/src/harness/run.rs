//! The benchmark loop: forward stub, backward simulation, update phase.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::placement::assign_subgroups;
use crate::scheduler::{Engine, EngineConfig, Flags, SeededGradients};
use crate::tier::Tier;
use crate::trace::{read_ndjson, unix_now_ns, write_ndjson, Event, EventTrace};

use super::config::{Mode, RunConfig};
use super::report::{aggregate, IterationReport, Summary, WorkerIteration};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub mode: Option<Mode>,
    /// Exactly these switches, overriding mode and config.
    pub flags: Option<Flags>,
    /// Run each worker as its own OS process.
    pub multiprocess: bool,
    /// Executable providing the `worker` subcommand; defaults to the
    /// current executable.
    pub worker_exe: Option<PathBuf>,
    pub label: Option<String>,
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub summary: Summary,
    pub iterations: Vec<IterationReport>,
    pub workers: Vec<WorkerIteration>,
    pub events: Vec<Event>,
}

/// Config with the command-line overrides folded in, so that it alone
/// determines the run.
pub fn resolve(cfg: &RunConfig, opts: &RunOptions) -> RunConfig {
    let mut cfg = cfg.clone();
    if let Some(mode) = opts.mode {
        cfg.schedule.mode = mode;
    }
    if let Some(flags) = opts.flags {
        cfg.schedule.mode = if flags == Flags::BASELINE {
            Mode::Baseline
        } else {
            Mode::Engine
        };
        cfg.schedule.flags = Some(flags);
    }
    cfg
}

fn engine_config(cfg: &RunConfig, worker: u32) -> EngineConfig {
    let sizes = cfg.subgroup_sizes();
    let s = &cfg.schedule;
    EngineConfig {
        worker_id: worker,
        first_subgroup_id: worker * sizes.len() as u32,
        subgroup_sizes: sizes,
        pool_slots: s.pool_slots,
        cache_slots: s.cache_slots,
        flags: cfg.flags(),
        hyper: cfg.optim,
        alpha: cfg.placement.alpha,
        ratio: cfg.placement.ratio.clone(),
        grad_accum_steps: s.grad_accum_steps,
        stall_timeout: cfg.stall_timeout(),
        seed: s.seed,
        exec: Default::default(),
    }
}

/// Fails when a directory tier cannot hold its initial share of the state.
pub fn preflight_capacity(cfg: &RunConfig, tiers: &[Arc<Tier>]) -> Result<()> {
    let flags = cfg.flags();
    let sizes = cfg.subgroup_sizes();
    let workers = cfg.schedule.workers_per_node as usize;
    let per_param = if flags.skip_gradients { 12 } else { 16 };
    let largest = sizes.iter().copied().max().unwrap_or(0) as u64 * per_param + 64;
    let m = sizes.len() * workers;
    let counts = if flags.multi_path {
        let bws: Vec<f64> = match &cfg.placement.ratio {
            Some(r) => r.clone(),
            None => tiers.iter().map(|t| t.spec().read_bw.min(t.spec().write_bw)).collect(),
        };
        assign_subgroups(m, &bws)?.counts
    } else {
        let mut c = vec![0; tiers.len()];
        c[0] = m;
        c
    };
    for (tier, &count) in tiers.iter().zip(&counts) {
        let needed = count as u64 * largest;
        if let Some(available) = tier.available_bytes() {
            if available < needed {
                return Err(Error::InsufficientCapacity {
                    tier_id: tier.id(),
                    needed,
                    available,
                });
            }
        }
    }
    Ok(())
}

/// Drives one worker through all iterations. With a barrier the workers
/// of one process advance in lock step; `apply_changes` makes this worker
/// apply the configured throttle changes.
fn worker_loop(
    cfg: &RunConfig,
    worker: u32,
    tiers: &[Arc<Tier>],
    trace: &Arc<EventTrace>,
    barrier: Option<&Barrier>,
    failed: &AtomicBool,
    apply_changes: bool,
) -> Result<Vec<WorkerIteration>> {
    let sync = || {
        if let Some(b) = barrier {
            b.wait();
        }
    };
    let mut error = None;
    let fail = |e: Error, error: &mut Option<Error>| {
        failed.store(true, Ordering::SeqCst);
        error.get_or_insert(e);
    };
    let mut engine = match Engine::new(
        engine_config(cfg, worker),
        tiers.to_vec(),
        Arc::clone(trace),
        cfg.schedule.lock_dir.as_deref(),
    )
    .and_then(|mut e| e.initialize().map(|_| e))
    {
        Ok(e) => Some(e),
        Err(e) => {
            fail(e, &mut error);
            None
        }
    };
    let source = SeededGradients {
        seed: cfg.schedule.seed,
        scale: cfg.schedule.grad_scale,
    };
    let forward = Duration::from_millis(cfg.schedule.forward_ms);
    let mut rows = Vec::new();
    sync();
    for it in 1..=cfg.schedule.iterations {
        if apply_changes {
            for c in cfg.schedule.throttle_changes.iter().filter(|c| c.iteration == it) {
                if let Some(t) = tiers[usize::from(c.tier)].throttle() {
                    t.set_rates(c.read_bw, c.write_bw);
                }
            }
        }
        sync();
        if let (Some(e), false) = (engine.as_mut(), failed.load(Ordering::SeqCst)) {
            let mut step = || -> Result<WorkerIteration> {
                let t = Instant::now();
                std::thread::sleep(forward);
                let forward_s = t.elapsed().as_secs_f64();
                let backward = e.run_backward_sim(it, &source)?;
                let update = match backward.overflow {
                    Some(_) => None,
                    None => Some(e.run_update(it)?),
                };
                Ok(WorkerIteration {
                    worker_id: worker,
                    iteration: it,
                    forward_s,
                    backward,
                    update,
                    distribution: e.distribution(),
                })
            };
            match step() {
                Ok(row) => rows.push(row),
                Err(err) => fail(err, &mut error),
            }
        }
        sync();
    }
    if let Some(mut e) = engine {
        if let Err(err) = e.remove_files() {
            fail(err, &mut error);
        }
    }
    match error {
        Some(e) => Err(e),
        None if failed.load(Ordering::SeqCst) => Err(Error::Cancelled),
        None => Ok(rows),
    }
}

/// Runs the configured benchmark and aggregates the results.
pub fn run_benchmark(cfg: &RunConfig, opts: &RunOptions) -> Result<BenchOutcome> {
    let cfg = resolve(cfg, opts);
    cfg.validate()?;
    let tiers = cfg.build_tiers()?;
    preflight_capacity(&cfg, &tiers)?;
    let (workers, events) = if opts.multiprocess {
        drop(tiers);
        run_processes(&cfg, opts)?
    } else {
        run_threads(&cfg, &tiers)?
    };
    let iterations = aggregate(&workers, &events, cfg.tiers.len(), cfg.schedule.warmup_iterations);
    let flags = cfg.flags();
    let summary = Summary::new(
        opts.label.clone().unwrap_or_else(|| flags.label()),
        cfg.schedule.mode,
        flags,
        cfg.schedule.workers_per_node,
        cfg.schedule.warmup_iterations,
        &iterations,
    );
    Ok(BenchOutcome {
        summary,
        iterations,
        workers,
        events,
    })
}

fn run_threads(cfg: &RunConfig, tiers: &[Arc<Tier>]) -> Result<(Vec<WorkerIteration>, Vec<Event>)> {
    let n = cfg.schedule.workers_per_node;
    let trace = Arc::new(EventTrace::new());
    let barrier = Barrier::new(n as usize);
    let failed = AtomicBool::new(false);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for w in 0..n {
            let (trace, barrier, failed, results) = (&trace, &barrier, &failed, &results);
            s.spawn(move || {
                let r = worker_loop(cfg, w, tiers, trace, Some(barrier), failed, w == 0);
                results.lock().unwrap().push((w, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(w, _)| *w);
    // Report the root cause rather than the cancellations it triggered.
    if let Some(pos) = results
        .iter()
        .position(|(_, r)| matches!(r, Err(e) if !matches!(e, Error::Cancelled)))
    {
        return Err(results.swap_remove(pos).1.unwrap_err());
    }
    let mut rows = Vec::new();
    for (_, r) in results {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| (r.iteration, r.worker_id));
    Ok((rows, trace.snapshot()))
}

fn run_processes(cfg: &RunConfig, opts: &RunOptions) -> Result<(Vec<WorkerIteration>, Vec<Event>)> {
    let exe = match &opts.worker_exe {
        Some(p) => p.clone(),
        None => std::env::current_exe().map_err(|e| Error::output("locating worker executable", e))?,
    };
    let scratch = tempfile::Builder::new()
        .prefix("tierflow-workers")
        .tempdir()
        .map_err(|e| Error::output("creating scratch dir", e))?;
    let cfg_path = scratch.path().join("run.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::output("writing worker config", e))?;
    let epoch = unix_now_ns();
    let children: Vec<_> = (0..cfg.schedule.workers_per_node)
        .map(|w| {
            Command::new(&exe)
                .arg("worker")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--worker-id")
                .arg(w.to_string())
                .arg("--epoch")
                .arg(epoch.to_string())
                .arg("--out")
                .arg(scratch.path().join(format!("w{w}")))
                .spawn()
                .map_err(|e| Error::output(format!("spawning worker {w}"), e))
        })
        .collect::<Result<_>>()?;
    let mut failures = Vec::new();
    for (w, mut child) in children.into_iter().enumerate() {
        let status = child.wait().map_err(|e| Error::output(format!("waiting for worker {w}"), e))?;
        if !status.success() {
            failures.push(format!("worker {w} exited with {status}"));
        }
    }
    if !failures.is_empty() {
        return Err(Error::Config(failures.join("; ")));
    }
    let mut rows = Vec::new();
    let mut events = Vec::new();
    for w in 0..cfg.schedule.workers_per_node {
        let (r, e) = read_worker_output(&scratch.path().join(format!("w{w}")))?;
        rows.extend(r);
        events.extend(e);
    }
    rows.sort_by_key(|r: &WorkerIteration| (r.iteration, r.worker_id));
    events.sort_by_key(|e| e.timestamp_ns);
    Ok((rows, events))
}

/// Body of a worker process: runs worker `worker` of `cfg` on its own
/// tiers and writes results plus trace under `out`.
pub fn run_worker_process(cfg: &RunConfig, worker: u32, epoch_unix_ns: u64, out: &Path) -> Result<()> {
    let tiers = cfg.build_tiers()?;
    let trace = Arc::new(EventTrace::aligned_to(epoch_unix_ns));
    let rows = worker_loop(cfg, worker, &tiers, &trace, None, &AtomicBool::new(false), true)?;
    fs::create_dir_all(out).map_err(|e| Error::output(out.display().to_string(), e))?;
    let json = serde_json::to_vec(&rows).expect("rows serialize");
    fs::write(out.join("rows.json"), json).map_err(|e| Error::output("writing worker rows", e))?;
    let f = fs::File::create(out.join("trace.ndjson")).map_err(|e| Error::output("writing worker trace", e))?;
    write_ndjson(&trace.snapshot(), BufWriter::new(f)).map_err(|e| Error::output("writing worker trace", e))
}

fn read_worker_output(dir: &Path) -> Result<(Vec<WorkerIteration>, Vec<Event>)> {
    let rows = fs::read(dir.join("rows.json")).map_err(|e| Error::output("reading worker rows", e))?;
    let rows = serde_json::from_slice(&rows).map_err(|e| Error::Config(format!("worker rows: {e}")))?;
    let f = fs::File::open(dir.join("trace.ndjson")).map_err(|e| Error::output("reading worker trace", e))?;
    let events = read_ndjson(BufReader::new(f)).map_err(|e| Error::output("reading worker trace", e))?;
    Ok((rows, events))
}

/// Writes events as CSV when `path` ends in `.csv`, else as NDJSON.
pub fn write_trace(path: &Path, events: &[Event]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::output(path.display().to_string(), e))?;
    let w = BufWriter::new(f);
    let r = if path.extension().is_some_and(|x| x == "csv") {
        crate::trace::write_csv(events, w)
    } else {
        write_ndjson(events, w)
    };
    r.map_err(|e| Error::output(path.display().to_string(), e))
}
