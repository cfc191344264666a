//! Background I/O lanes of one worker.
//!
//! Each tier gets either one lane serving both directions (when transfers
//! take the node-level tier lock) or a read lane and a write lane. A lane
//! pops queued prefetches before queued flushes, runs the transfer and
//! reports back to the coordinator over a channel.

use std::collections::VecDeque;
use std::sync::mpsc::Sender;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::placement::Direction;
use crate::tier::format::HEADER_LEN;
use crate::tier::{
    read_gradient_into, read_subgroup_into, write_gradient, write_subgroup, FileKind, IoStats, Tier,
    TierLocks,
};
use crate::trace::{EventKind, EventTrace};

use super::pool::SlotBuffers;

#[derive(Debug)]
pub(crate) enum Job {
    Prefetch {
        local: usize,
        slot: usize,
        id: u32,
        iteration: u32,
        with_grads: bool,
        buf: SlotBuffers,
    },
    Flush {
        local: usize,
        slot: usize,
        id: u32,
        iteration: u32,
        /// Tier holding an outdated copy to delete after the write.
        stale: Option<u16>,
        buf: SlotBuffers,
    },
    GradFlush {
        local: usize,
        id: u32,
        iteration: u32,
        grads: Vec<f32>,
    },
}

impl Job {
    fn local(&self) -> usize {
        match self {
            Job::Prefetch { local, .. } | Job::Flush { local, .. } | Job::GradFlush { local, .. } => {
                *local
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum JobKind {
    Prefetch,
    Flush,
    GradFlush,
}

/// Outcome of one job. Buffers always come back, even on failure.
#[derive(Debug)]
pub(crate) struct Done {
    pub local: usize,
    pub tier: u16,
    pub kind: JobKind,
    pub slot: Option<usize>,
    pub buf: Option<SlotBuffers>,
    pub grads: Option<Vec<f32>>,
    /// Whole-file transfers performed, for bandwidth re-estimation.
    pub transfers: Vec<(Direction, IoStats)>,
    pub result: Result<()>,
}

#[derive(Default)]
struct Queue {
    prefetch: VecDeque<Job>,
    flush: VecDeque<Job>,
    closed: bool,
}

struct Lane {
    queue: Mutex<Queue>,
    ready: Condvar,
}

struct LaneCtx {
    tier: Arc<Tier>,
    stale_tiers: Vec<Arc<Tier>>,
    locks: Option<TierLocks>,
    trace: Arc<EventTrace>,
    worker: u32,
    done: Sender<Done>,
}

pub(crate) struct IoLanes {
    lanes: Vec<Arc<Lane>>,
    /// Per tier: (read lane, write lane); equal when one lane serves both.
    route: Vec<(usize, usize)>,
    threads: Vec<JoinHandle<()>>,
}

impl IoLanes {
    pub fn spawn(
        tiers: &[Arc<Tier>],
        locks: Option<TierLocks>,
        trace: &Arc<EventTrace>,
        worker: u32,
        done: &Sender<Done>,
    ) -> Result<Self> {
        let mut lanes = Vec::new();
        let mut route = Vec::new();
        let mut threads = Vec::new();
        let split = locks.is_none();
        for tier in tiers {
            let first = lanes.len();
            let count = if split { 2 } else { 1 };
            for k in 0..count {
                let lane = Arc::new(Lane {
                    queue: Mutex::new(Queue::default()),
                    ready: Condvar::new(),
                });
                let ctx = LaneCtx {
                    tier: Arc::clone(tier),
                    stale_tiers: tiers.to_vec(),
                    locks: locks.clone(),
                    trace: Arc::clone(trace),
                    worker,
                    done: done.clone(),
                };
                let l = Arc::clone(&lane);
                let name = format!("w{worker}-t{}-{}", tier.id(), if k == 0 { "r" } else { "w" });
                let handle = std::thread::Builder::new()
                    .name(name)
                    .spawn(move || run_lane(&l, &ctx))
                    .map_err(|e| Error::io(tier.id(), e))?;
                lanes.push(lane);
                threads.push(handle);
            }
            route.push((first, first + count - 1));
        }
        Ok(Self {
            lanes,
            route,
            threads,
        })
    }

    pub fn submit(&self, tier: u16, job: Job) {
        let (read, write) = self.route[usize::from(tier)];
        let (lane, prefetch) = match job {
            Job::Prefetch { .. } => (&self.lanes[read], true),
            _ => (&self.lanes[write], false),
        };
        let mut q = lane.queue.lock().unwrap();
        if prefetch {
            q.prefetch.push_back(job);
        } else {
            q.flush.push_back(job);
        }
        drop(q);
        lane.ready.notify_one();
    }

    fn close(&mut self) {
        for lane in &self.lanes {
            lane.queue.lock().unwrap().closed = true;
            lane.ready.notify_all();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for IoLanes {
    fn drop(&mut self) {
        self.close();
    }
}

fn run_lane(lane: &Lane, ctx: &LaneCtx) {
    loop {
        let (job, closed) = {
            let mut q = lane.queue.lock().unwrap();
            loop {
                if let Some(job) = q.prefetch.pop_front().or_else(|| q.flush.pop_front()) {
                    break (job, q.closed);
                }
                if q.closed {
                    return;
                }
                q = lane.ready.wait(q).unwrap();
            }
        };
        let done = if closed {
            cancelled(job, ctx.tier.id())
        } else {
            execute(job, ctx)
        };
        if ctx.done.send(done).is_err() {
            return;
        }
    }
}

fn cancelled(job: Job, tier: u16) -> Done {
    let local = job.local();
    let (kind, slot, buf, grads) = match job {
        Job::Prefetch { slot, buf, .. } => (JobKind::Prefetch, Some(slot), Some(buf), None),
        Job::Flush { slot, buf, .. } => (JobKind::Flush, Some(slot), Some(buf), None),
        Job::GradFlush { grads, .. } => (JobKind::GradFlush, None, None, Some(grads)),
    };
    Done {
        local,
        tier,
        kind,
        slot,
        buf,
        grads,
        transfers: Vec::new(),
        result: Err(Error::Cancelled),
    }
}

fn payload(stats: &IoStats) -> u64 {
    stats.bytes.saturating_sub(HEADER_LEN as u64)
}

fn execute(job: Job, ctx: &LaneCtx) -> Done {
    let tier = ctx.tier.id();
    let (iteration, id) = match &job {
        Job::Prefetch { iteration, id, .. }
        | Job::Flush { iteration, id, .. }
        | Job::GradFlush { iteration, id, .. } => (*iteration, *id),
    };
    let guard = match &ctx.locks {
        Some(locks) => match locks.acquire(tier, ctx.worker, iteration) {
            Ok(g) => Some(g),
            Err(e) => {
                let mut d = cancelled(job, tier);
                d.result = Err(e);
                return d;
            }
        },
        None => None,
    };
    let record = |kind, bytes| ctx.trace.record(ctx.worker, kind, iteration, Some(id), Some(tier), bytes);
    let mut transfers = Vec::new();
    let done = match job {
        Job::Prefetch {
            local,
            slot,
            with_grads,
            mut buf,
            ..
        } => {
            record(EventKind::PrefetchStart, 0);
            let mut run = || -> Result<u64> {
                let s = read_subgroup_into(&ctx.tier, id, &mut buf.state)?;
                transfers.push((Direction::Read, s));
                let mut bytes = payload(&s);
                if with_grads {
                    let g = read_gradient_into(&ctx.tier, id, &mut buf.grads)?;
                    transfers.push((Direction::Read, g));
                    bytes += payload(&g);
                }
                Ok(bytes)
            };
            let result = run();
            record(EventKind::PrefetchEnd, *result.as_ref().unwrap_or(&0));
            Done {
                local,
                tier,
                kind: JobKind::Prefetch,
                slot: Some(slot),
                buf: Some(buf),
                grads: None,
                transfers,
                result: result.map(|_| ()),
            }
        }
        Job::Flush {
            local,
            slot,
            stale,
            buf,
            ..
        } => {
            record(EventKind::FlushStart, 0);
            let result = write_subgroup(&ctx.tier, &buf.state);
            record(EventKind::FlushEnd, result.as_ref().map_or(0, payload));
            let result = result.and_then(|s| {
                transfers.push((Direction::Write, s));
                match stale {
                    Some(old) if old != tier => {
                        ctx.stale_tiers[usize::from(old)].remove(id, FileKind::State)?;
                        ctx.stale_tiers[usize::from(old)].remove(id, FileKind::Gradient)
                    }
                    _ => Ok(()),
                }
            });
            Done {
                local,
                tier,
                kind: JobKind::Flush,
                slot: Some(slot),
                buf: Some(buf),
                grads: None,
                transfers,
                result,
            }
        }
        Job::GradFlush { local, grads, .. } => {
            record(EventKind::GradFlushStart, 0);
            let result = write_gradient(&ctx.tier, id, &grads);
            record(EventKind::GradFlushEnd, result.as_ref().map_or(0, payload));
            Done {
                local,
                tier,
                kind: JobKind::GradFlush,
                slot: None,
                buf: None,
                grads: Some(grads),
                transfers: Vec::new(),
                result: result.map(|_| ()),
            }
        }
    };
    drop(guard);
    done
}
