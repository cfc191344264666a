//! Stress test of the tier locks: workers repeatedly take and hold tier
//! locks, and the merged trace is checked for overlapping holds.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tier::TierLocks;
use crate::trace::{read_ndjson, unix_now_ns, write_ndjson, Event, EventTrace};

#[derive(Clone, Debug)]
pub struct LockCheck {
    pub dir: PathBuf,
    pub workers: u32,
    pub tiers: u16,
    /// Lock acquisitions per worker.
    pub ops: u32,
    pub hold: Duration,
}

/// One worker's share: `ops` acquisitions of random tiers.
pub fn lock_worker(locks: &TierLocks, worker: u32, tiers: u16, ops: u32, hold: Duration) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(worker));
    for op in 0..ops {
        let tier = rng.random_range(0..tiers);
        let _guard = locks.acquire(tier, worker, op)?;
        std::thread::sleep(hold);
    }
    Ok(())
}

/// Workers as threads of this process.
pub fn run_threads(check: &LockCheck) -> Result<Vec<Event>> {
    let trace = Arc::new(EventTrace::new());
    let locks = TierLocks::new(&check.dir, Arc::clone(&trace))?;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..check.workers)
            .map(|w| {
                let locks = &locks;
                s.spawn(move || lock_worker(locks, w, check.tiers, check.ops, check.hold))
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("lock worker panicked"))
    })?;
    Ok(trace.snapshot())
}

/// Workers as separate processes of `exe`, which must provide the
/// `lock-worker` subcommand.
pub fn run_processes(check: &LockCheck, exe: &Path) -> Result<Vec<Event>> {
    let scratch = tempfile::Builder::new()
        .prefix("tierflow-lockcheck")
        .tempdir()
        .map_err(|e| Error::output("creating scratch dir", e))?;
    let epoch = unix_now_ns();
    let children: Vec<_> = (0..check.workers)
        .map(|w| {
            Command::new(exe)
                .arg("lock-worker")
                .arg("--dir")
                .arg(&check.dir)
                .arg("--worker-id")
                .arg(w.to_string())
                .arg("--tiers")
                .arg(check.tiers.to_string())
                .arg("--ops")
                .arg(check.ops.to_string())
                .arg("--hold-us")
                .arg(check.hold.as_micros().to_string())
                .arg("--epoch")
                .arg(epoch.to_string())
                .arg("--trace-out")
                .arg(scratch.path().join(format!("w{w}.ndjson")))
                .spawn()
                .map_err(|e| Error::output(format!("spawning lock worker {w}"), e))
        })
        .collect::<Result<_>>()?;
    for (w, mut child) in children.into_iter().enumerate() {
        let status = child
            .wait()
            .map_err(|e| Error::output(format!("waiting for lock worker {w}"), e))?;
        if !status.success() {
            return Err(Error::Config(format!("lock worker {w} exited with {status}")));
        }
    }
    let mut events = Vec::new();
    for w in 0..check.workers {
        let path = scratch.path().join(format!("w{w}.ndjson"));
        let f = fs::File::open(&path).map_err(|e| Error::output(path.display().to_string(), e))?;
        events.extend(read_ndjson(BufReader::new(f)).map_err(|e| Error::output("reading lock trace", e))?);
    }
    events.sort_by_key(|e| e.timestamp_ns);
    Ok(events)
}

/// Body of a `lock-worker` process.
pub fn run_lock_worker_process(
    dir: &Path,
    worker: u32,
    tiers: u16,
    ops: u32,
    hold: Duration,
    epoch_unix_ns: u64,
    trace_out: &Path,
) -> Result<()> {
    let trace = Arc::new(EventTrace::aligned_to(epoch_unix_ns));
    let locks = TierLocks::new(dir, Arc::clone(&trace))?;
    lock_worker(&locks, worker, tiers, ops, hold)?;
    let f = fs::File::create(trace_out).map_err(|e| Error::output(trace_out.display().to_string(), e))?;
    write_ndjson(&trace.snapshot(), BufWriter::new(f)).map_err(|e| Error::output("writing lock trace", e))
}
