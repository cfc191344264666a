//! Overlapped prefetch / update / flush pipeline over multi-tier storage.
//!
//! One coordinator (the [`Engine`]) walks the subgroups of a worker in plan
//! order. While subgroup `k` is updated on the host, later subgroups are
//! being prefetched into free host slots and earlier ones are being flushed
//! by per-tier I/O lanes. A slot is reserved before its prefetch is queued,
//! so the pipeline can never fill up with work that cannot finish.
//!
//! With caching enabled the order alternates between ascending and
//! descending every update phase and the last `cache_slots` subgroups of a
//! phase stay on the host, so the next phase starts with them.

mod grads;
mod lanes;
pub mod pool;

use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use half::f16;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optimizer::{adam_step_with, AdamHyper, Residency, Subgroup};
use crate::placement::{
    assign_subgroups, update_bandwidth_estimates, AllocationVector, BandwidthEstimate, CachePlan,
    Destination, Observation,
};
use crate::precision::{downscale_into, upscale_into, GradBufferF16};
use crate::tier::format::HEADER_LEN;
use crate::tier::{read_subgroup, write_subgroup, Tier, TierLocks};
use crate::trace::{EventKind, EventTrace};

pub use grads::{GradientSource, SeededGradients};
use lanes::{Done, IoLanes, Job, JobKind};
pub use pool::{HostBufferPool, SlotBuffers, SlotState};

/// The four ablation switches. All off is the baseline data flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    /// Alternate the update order and retain subgroups on the host.
    pub enable_caching: bool,
    /// Keep FP16 gradients on the host and widen them just before the update.
    pub skip_gradients: bool,
    /// One transfer per tier per node at a time, under the tier lock.
    pub atomic_rw: bool,
    /// Spread subgroups over all tiers instead of tier 0 only.
    pub multi_path: bool,
}

impl Flags {
    pub const ENGINE: Flags = Flags {
        enable_caching: true,
        skip_gradients: true,
        atomic_rw: true,
        multi_path: true,
    };
    pub const BASELINE: Flags = Flags {
        enable_caching: false,
        skip_gradients: false,
        atomic_rw: false,
        multi_path: false,
    };

    /// Baseline, then caching, gradient skipping, atomic transfers and
    /// multi-path switched on one after another.
    pub fn progressive() -> [Flags; 5] {
        let mut steps = [Flags::BASELINE; 5];
        for k in 1..5 {
            let mut f = steps[k - 1];
            match k {
                1 => f.enable_caching = true,
                2 => f.skip_gradients = true,
                3 => f.atomic_rw = true,
                _ => f.multi_path = true,
            }
            steps[k] = f;
        }
        steps
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [
            (self.enable_caching, "caching"),
            (self.skip_gradients, "skip-gradients"),
            (self.atomic_rw, "atomic-rw"),
            (self.multi_path, "multi-path"),
        ]
        .iter()
        .filter(|(b, _)| *b)
        .map(|(_, n)| *n)
        .collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub worker_id: u32,
    /// Global id of this worker's first subgroup.
    pub first_subgroup_id: u32,
    /// Parameter count of each subgroup; the last may be smaller.
    pub subgroup_sizes: Vec<usize>,
    /// Host slots for in-flight subgroups (at least 3).
    pub pool_slots: usize,
    /// Extra host slots for subgroups retained across update phases.
    pub cache_slots: usize,
    pub flags: Flags,
    pub hyper: AdamHyper,
    /// Smoothing factor of the bandwidth re-estimation.
    pub alpha: f64,
    /// Fixed placement weights instead of the measured bandwidths.
    pub ratio: Option<Vec<f64>>,
    pub grad_accum_steps: u32,
    /// How long to wait for any I/O completion before declaring a stall.
    pub stall_timeout: Duration,
    pub seed: u64,
    pub exec: Exec,
}

impl EngineConfig {
    pub fn new(subgroup_sizes: Vec<usize>) -> Self {
        Self {
            worker_id: 0,
            first_subgroup_id: 0,
            subgroup_sizes,
            pool_slots: 4,
            cache_slots: 0,
            flags: Flags::ENGINE,
            hyper: AdamHyper::default(),
            alpha: 0.5,
            ratio: None,
            grad_accum_steps: 1,
            stall_timeout: Duration::from_secs(30),
            seed: 0,
            exec: Exec::default(),
        }
    }

    /// `total` parameters cut into subgroups of `per` (last one ragged).
    pub fn split(total: usize, per: usize) -> Vec<usize> {
        assert!(per > 0);
        let mut sizes = vec![per; total / per];
        if !total.is_multiple_of(per) {
            sizes.push(total % per);
        }
        sizes
    }

    fn effective_cache_slots(&self) -> usize {
        if self.flags.enable_caching {
            self.cache_slots.min(self.subgroup_sizes.len())
        } else {
            0
        }
    }

    fn validate(&self, tiers: &[Arc<Tier>]) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if tiers.is_empty() {
            return bad("at least one tier is required".into());
        }
        if let Some((i, t)) = tiers.iter().enumerate().find(|(i, t)| usize::from(t.id()) != *i) {
            return bad(format!("tier at position {i} has id {}", t.id()));
        }
        if self.subgroup_sizes.is_empty() || self.subgroup_sizes.contains(&0) {
            return bad("subgroups must be non-empty".into());
        }
        if self.pool_slots < 3 {
            return bad(format!("pool_slots = {} but at least 3 are needed", self.pool_slots));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha = {} is outside (0, 1]", self.alpha));
        }
        if let Some(r) = &self.ratio {
            if r.len() != tiers.len() {
                return bad(format!("placement ratio has {} entries for {} tiers", r.len(), tiers.len()));
            }
        }
        if self.stall_timeout.is_zero() {
            return bad("stall timeout must be positive".into());
        }
        self.hyper.validate()
    }
}

/// Order and flush targets of one update phase. Indices are local to the
/// worker.
#[derive(Clone, Debug)]
pub struct UpdatePlan {
    pub phase: u64,
    pub iteration: u32,
    pub ascending: bool,
    pub order: Vec<usize>,
    /// Where each subgroup was at the start of the phase.
    pub origin: Vec<Residency>,
    pub destination: CachePlan,
    pub allocation: AllocationVector,
}

impl UpdatePlan {
    pub fn order_for(m: usize, ascending: bool) -> Vec<usize> {
        if ascending {
            (0..m).collect()
        } else {
            (0..m).rev().collect()
        }
    }
}

/// Subgroup processed after `i` under `plan`, if any.
pub fn next_subgroup(i: usize, plan: &UpdatePlan) -> Option<usize> {
    let m = plan.order.len();
    if i >= m {
        return None;
    }
    if plan.ascending {
        (i + 1 < m).then_some(i + 1)
    } else {
        i.checked_sub(1)
    }
}

/// Parameters held on the host and on each tier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Distribution {
    pub host_params: u64,
    pub tier_params: Vec<u64>,
}

impl Distribution {
    /// `(host %, per-tier %)`.
    pub fn percentages(&self) -> (f64, Vec<f64>) {
        let total = (self.host_params + self.tier_params.iter().sum::<u64>()).max(1) as f64;
        (
            100.0 * self.host_params as f64 / total,
            self.tier_params.iter().map(|&p| 100.0 * p as f64 / total).collect(),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UpdateReport {
    pub iteration: u32,
    pub phase: u64,
    pub ascending: bool,
    pub wall: Duration,
    pub params_updated: u64,
    pub cache_hits: usize,
    /// Payload bytes read from and written to each tier.
    pub read_bytes: Vec<u64>,
    pub write_bytes: Vec<u64>,
    /// Subgroups flushed to each tier.
    pub allocation: Vec<usize>,
    pub retained: usize,
    /// Parameters that overflowed FP16 when copied to the device.
    pub downscale_overflow: usize,
    /// Time spent in widening, Adam and the device copy.
    pub compute: Duration,
    /// Effective bandwidth per tier after this phase's re-estimation.
    pub effective_bw: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackwardReport {
    pub iteration: u32,
    pub wall: Duration,
    /// `(subgroup id, element)` of the first non-finite gradient.
    pub overflow: Option<(u32, usize)>,
    /// FP32 gradient bytes written to tiers.
    pub grad_write_bytes: u64,
}

#[derive(Clone, Copy, Debug)]
struct Meta {
    id: u32,
    len: usize,
    residency: Residency,
    /// Tier holding the latest (or an outdated) state file.
    file_on: Option<u16>,
    slot: Option<usize>,
    /// FP32 gradients for the next update already sit in the slot buffer.
    grads_on_host: bool,
    step_count: u64,
}

pub struct Engine {
    cfg: EngineConfig,
    tiers: Vec<Arc<Tier>>,
    trace: Arc<EventTrace>,
    locks: Option<TierLocks>,
    lanes: IoLanes,
    done_rx: Receiver<Done>,
    pool: HostBufferPool,
    meta: Vec<Meta>,
    grads16: Vec<GradBufferF16>,
    shadow: Vec<Vec<f16>>,
    estimate: BandwidthEstimate,
    spare_grads: Vec<Vec<f32>>,
    phase: u64,
    step: u64,
    iteration: u32,
    pending: usize,
    grad_inflight: usize,
    observations: Vec<Observation>,
    read_bytes: Vec<u64>,
    write_bytes: Vec<u64>,
    hits: usize,
}

impl Engine {
    /// Builds the engine and its I/O lanes. Tier `k` of `tiers` must have
    /// id `k`. Tier locks live in `$TIERFLOW_LOCK_DIR`, else `lock_dir`.
    pub fn new(
        cfg: EngineConfig,
        tiers: Vec<Arc<Tier>>,
        trace: Arc<EventTrace>,
        lock_dir: Option<&Path>,
    ) -> Result<Self> {
        cfg.validate(&tiers)?;
        let locks = if cfg.flags.atomic_rw {
            Some(TierLocks::new(TierLocks::resolve_dir(lock_dir), Arc::clone(&trace))?)
        } else {
            None
        };
        let (tx, done_rx) = mpsc::channel();
        let lanes = IoLanes::spawn(&tiers, locks.clone(), &trace, cfg.worker_id, &tx)?;
        let max_len = cfg.subgroup_sizes.iter().copied().max().unwrap_or(0);
        let pool = HostBufferPool::new(cfg.pool_slots + cfg.effective_cache_slots(), max_len);
        let estimate = BandwidthEstimate::new(
            tiers.iter().map(|t| t.spec().read_bw).collect(),
            tiers.iter().map(|t| t.spec().write_bw).collect(),
            cfg.alpha,
        )?;
        let meta = cfg
            .subgroup_sizes
            .iter()
            .enumerate()
            .map(|(i, &len)| Meta {
                id: cfg.first_subgroup_id + i as u32,
                len,
                residency: Residency::HostCached,
                file_on: None,
                slot: None,
                grads_on_host: false,
                step_count: 0,
            })
            .collect();
        let n = tiers.len();
        Ok(Self {
            grads16: cfg.subgroup_sizes.iter().map(|&l| GradBufferF16::new(l)).collect(),
            shadow: cfg.subgroup_sizes.iter().map(|&l| vec![f16::ZERO; l]).collect(),
            cfg,
            tiers,
            trace,
            locks,
            lanes,
            done_rx,
            pool,
            meta,
            estimate,
            spare_grads: Vec::new(),
            phase: 0,
            step: 0,
            iteration: 0,
            pending: 0,
            grad_inflight: 0,
            observations: Vec::new(),
            read_bytes: vec![0; n],
            write_bytes: vec![0; n],
            hits: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &Arc<EventTrace> {
        &self.trace
    }

    pub fn tiers(&self) -> &[Arc<Tier>] {
        &self.tiers
    }

    pub fn subgroup_count(&self) -> usize {
        self.meta.len()
    }

    pub fn subgroup_id(&self, i: usize) -> u32 {
        self.meta[i].id
    }

    pub fn residency(&self, i: usize) -> Residency {
        self.meta[i].residency
    }

    pub fn estimates(&self) -> &BandwidthEstimate {
        &self.estimate
    }

    pub fn phases_completed(&self) -> u64 {
        self.phase
    }

    pub fn pool(&self) -> &HostBufferPool {
        &self.pool
    }

    pub fn grad_buffer(&self, i: usize) -> &GradBufferF16 {
        &self.grads16[i]
    }

    /// FP16 parameters last copied to the (emulated) device.
    pub fn device_shadow(&self, i: usize) -> &[f16] {
        &self.shadow[i]
    }

    pub fn distribution(&self) -> Distribution {
        let mut d = Distribution {
            host_params: 0,
            tier_params: vec![0; self.tiers.len()],
        };
        for m in &self.meta {
            match m.residency {
                Residency::OnTier(t) => d.tier_params[usize::from(t)] += m.len as u64,
                _ => d.host_params += m.len as u64,
            }
        }
        d
    }

    fn record(&self, kind: EventKind, sg: Option<u32>, tier: Option<u16>, bytes: u64) {
        self.trace
            .record(self.cfg.worker_id, kind, self.iteration, sg, tier, bytes);
    }

    fn allocation(&self, flushed: usize) -> Result<AllocationVector> {
        let n = self.tiers.len();
        if !self.cfg.flags.multi_path {
            return Ok(AllocationVector::single(flushed, n));
        }
        let weights = match &self.cfg.ratio {
            Some(r) => r.clone(),
            None => self.estimate.effective(),
        };
        assign_subgroups(flushed, &weights)
    }

    /// Writes freshly seeded state for every subgroup to its initial tier.
    pub fn initialize(&mut self) -> Result<()> {
        let m = self.meta.len();
        let order = UpdatePlan::order_for(m, true);
        let plan = CachePlan::new(&order, &self.allocation(m)?, 0)?;
        for i in 0..m {
            let Destination::Tier(t) = plan.destinations()[i] else {
                unreachable!("initial placement retains nothing")
            };
            let Meta { id, len, .. } = self.meta[i];
            let sg = Subgroup::seeded(id, len, self.cfg.seed);
            {
                let _guard = match &self.locks {
                    Some(l) => Some(l.acquire(t, self.cfg.worker_id, 0)?),
                    None => None,
                };
                write_subgroup(&self.tiers[usize::from(t)], &sg)?;
            }
            downscale_into(&sg.params, &mut self.shadow[i], self.cfg.exec)?;
            let meta = &mut self.meta[i];
            meta.residency = Residency::OnTier(t);
            meta.file_on = Some(t);
        }
        Ok(())
    }

    /// Produces this iteration's FP16 gradients, accumulated over the
    /// configured micro-batches. Without gradient skipping the gradients
    /// are also widened and written next to each tier-resident subgroup.
    pub fn run_backward_sim(
        &mut self,
        iteration: u32,
        source: &dyn GradientSource,
    ) -> Result<BackwardReport> {
        self.iteration = iteration;
        let start = Instant::now();
        self.record(EventKind::BackwardStart, None, None, 0);
        let ids: Vec<u32> = self.meta.iter().map(|m| m.id).collect();
        for g in &mut self.grads16 {
            g.reset();
        }
        for micro in 0..self.cfg.grad_accum_steps.max(1) {
            let work = |(g, id): (&mut GradBufferF16, &u32)| -> Result<()> {
                let mut tmp = vec![f16::ZERO; g.len()];
                source.fill(iteration, *id, micro, &mut tmp);
                g.accumulate(&tmp)
            };
            match self.cfg.exec {
                Exec::Sequential => self.grads16.iter_mut().zip(&ids).try_for_each(work)?,
                #[cfg(feature = "parallel")]
                Exec::Parallel => self.grads16.par_iter_mut().zip(&ids).try_for_each(work)?,
            }
        }
        let overflow = self
            .grads16
            .iter()
            .zip(&ids)
            .find_map(|(g, &id)| g.first_non_finite().map(|e| (id, e)));

        let mut grad_write_bytes = 0;
        if !self.cfg.flags.skip_gradients && overflow.is_none() {
            for i in 0..self.meta.len() {
                let Meta { id, len, .. } = self.meta[i];
                let mut g32 = self.spare_grads.pop().unwrap_or_default();
                g32.resize(len, 0.0);
                self.record(EventKind::GradUpscaleStart, Some(id), None, 0);
                upscale_into(self.grads16[i].as_slice(), &mut g32, self.cfg.exec)?;
                self.record(EventKind::GradUpscaleEnd, Some(id), None, 4 * len as u64);
                match self.meta[i].residency {
                    Residency::HostCached => {
                        let slot = self.meta[i].slot.expect("host subgroup owns a slot");
                        let buf = self.pool.buffers_mut(slot).expect("slot buffers present");
                        let old = std::mem::replace(&mut buf.grads, g32);
                        self.spare_grads.push(old);
                        self.meta[i].grads_on_host = true;
                    }
                    Residency::OnTier(t) => {
                        self.lanes.submit(
                            t,
                            Job::GradFlush {
                                local: i,
                                id,
                                iteration,
                                grads: g32,
                            },
                        );
                        self.pending += 1;
                        self.grad_inflight += 1;
                        grad_write_bytes += 4 * len as u64;
                        while self.grad_inflight >= 2 {
                            self.wait_one()?;
                        }
                    }
                    Residency::InFlight => {
                        return Err(Error::Config(format!(
                            "subgroup {id} is in flight during backward"
                        )))
                    }
                }
            }
            self.drain()?;
        }
        self.record(EventKind::BackwardEnd, None, None, 0);
        Ok(BackwardReport {
            iteration,
            wall: start.elapsed(),
            overflow,
            grad_write_bytes,
        })
    }

    /// Plan for the next update phase given the current residencies.
    pub fn plan_phase(&self, iteration: u32) -> Result<UpdatePlan> {
        let m = self.meta.len();
        let ascending = !self.cfg.flags.enable_caching || self.phase.is_multiple_of(2);
        let order = UpdatePlan::order_for(m, ascending);
        let retained = self.cfg.effective_cache_slots();
        let allocation = self.allocation(m - retained)?;
        let destination = CachePlan::new(&order, &allocation, retained)?;
        Ok(UpdatePlan {
            phase: self.phase,
            iteration,
            ascending,
            order,
            origin: self.meta.iter().map(|m| m.residency).collect(),
            destination,
            allocation,
        })
    }

    /// Updates every subgroup once with the next Adam timestep.
    pub fn run_update(&mut self, iteration: u32) -> Result<UpdateReport> {
        self.iteration = iteration;
        let start = Instant::now();
        self.record(EventKind::UpdatePhaseStart, None, None, 0);
        let plan = self.plan_phase(iteration)?;
        let step = self.step + 1;
        self.observations.clear();
        self.read_bytes.fill(0);
        self.write_bytes.fill(0);
        self.hits = 0;

        let mut compute = Duration::ZERO;
        let mut downscale_overflow = 0;
        let mut next_issue = 0;
        self.fill_prefetch(&plan, &mut next_issue)?;
        for (pos, &i) in plan.order.iter().enumerate() {
            self.f2h_prefetch_wait_subgroup(i)?;
            // A subgroup fetched synchronously must not be fetched again
            // once its flush lands.
            next_issue = next_issue.max(pos + 1);
            let t0 = Instant::now();
            downscale_overflow += self.update_one(i, step)?;
            compute += t0.elapsed();
            match plan.destination.destinations()[i] {
                Destination::Retain => {
                    let slot = self.meta[i].slot.expect("updated subgroup owns a slot");
                    self.pool.set(slot, SlotState::Cached);
                }
                Destination::Tier(t) => self.async_h2f_flush(i, t)?,
            }
            self.poll()?;
            self.fill_prefetch(&plan, &mut next_issue)?;
        }
        self.drain()?;
        self.record(EventKind::UpdatePhaseEnd, None, None, 0);
        let wall = start.elapsed();

        self.estimate = update_bandwidth_estimates(&self.estimate, &self.observations);
        self.phase += 1;
        self.step = step;
        Ok(UpdateReport {
            iteration,
            phase: plan.phase,
            ascending: plan.ascending,
            wall,
            params_updated: self.meta.iter().map(|m| m.len as u64).sum(),
            cache_hits: self.hits,
            read_bytes: self.read_bytes.clone(),
            write_bytes: self.write_bytes.clone(),
            allocation: plan.destination.tier_counts(self.tiers.len()),
            retained: plan.destination.retained(),
            downscale_overflow,
            compute,
            effective_bw: self.estimate.effective(),
        })
    }

    /// Update phase of the baseline data flow. Identical to
    /// [`Engine::run_update`] for an engine built with [`Flags::BASELINE`].
    pub fn run_baseline_update(&mut self, iteration: u32) -> Result<UpdateReport> {
        if self.cfg.flags != Flags::BASELINE {
            return Err(Error::Config("engine was not built with baseline flags".into()));
        }
        self.run_update(iteration)
    }

    /// Queues prefetches in plan order for as long as host slots are free.
    fn fill_prefetch(&mut self, plan: &UpdatePlan, next_issue: &mut usize) -> Result<()> {
        while let Some(&i) = plan.order.get(*next_issue) {
            if let Residency::OnTier(_) = self.meta[i].residency {
                if !self.try_prefetch(i)? {
                    break;
                }
            }
            *next_issue += 1;
        }
        Ok(())
    }

    fn try_prefetch(&mut self, i: usize) -> Result<bool> {
        let Residency::OnTier(t) = self.meta[i].residency else {
            return Ok(false);
        };
        let Some(slot) = self.pool.reserve(i, SlotState::Prefetching) else {
            return Ok(false);
        };
        let buf = self.pool.take(slot);
        let id = self.meta[i].id;
        self.meta[i].residency = Residency::InFlight;
        self.meta[i].slot = Some(slot);
        self.record(EventKind::PrefetchEnqueue, Some(id), Some(t), 0);
        self.lanes.submit(
            t,
            Job::Prefetch {
                local: i,
                slot,
                id,
                iteration: self.iteration,
                with_grads: !self.cfg.flags.skip_gradients,
                buf,
            },
        );
        self.pending += 1;
        Ok(true)
    }

    /// Queues a prefetch of subgroup `i` from the tier that holds it,
    /// waiting for a free slot if necessary. Returns `false` when `i` is
    /// already on the host or on its way; a retained subgroup's cache hit is
    /// recorded when it is waited for.
    pub fn async_f2h_prefetch(&mut self, i: usize) -> Result<bool> {
        loop {
            match self.meta[i].residency {
                Residency::HostCached | Residency::InFlight => return Ok(false),
                Residency::OnTier(_) => {
                    if self.try_prefetch(i)? {
                        return Ok(true);
                    }
                    self.wait_for_progress()?;
                }
            }
        }
    }

    /// Blocks until subgroup `i` is on the host and returns it. Subgroups
    /// retained from the previous phase return at once and count as a
    /// cache hit; subgroups nobody prefetched are fetched synchronously.
    pub fn f2h_prefetch_wait_subgroup(&mut self, i: usize) -> Result<&Subgroup> {
        let slot = loop {
            match self.meta[i].residency {
                Residency::HostCached => {
                    let slot = self.meta[i].slot.expect("host subgroup owns a slot");
                    if self.pool.state(slot) == SlotState::Cached {
                        self.record(EventKind::CacheHit, Some(self.meta[i].id), None, 0);
                        self.hits += 1;
                        self.pool.set(slot, SlotState::Ready);
                    }
                    break slot;
                }
                Residency::InFlight => self.wait_one()?,
                Residency::OnTier(_) => {
                    if !self.try_prefetch(i)? {
                        self.wait_for_progress()?;
                    }
                }
            }
        };
        Ok(&self
            .pool
            .buffers(slot)
            .expect("host subgroup buffers present")
            .state)
    }

    /// Queues the write-back of host-resident subgroup `i` to tier `tier`.
    pub fn async_h2f_flush(&mut self, i: usize, tier: u16) -> Result<()> {
        if usize::from(tier) >= self.tiers.len() {
            return Err(Error::Config(format!("no tier {tier}")));
        }
        let meta = self.meta[i];
        let (Residency::HostCached, Some(slot)) = (meta.residency, meta.slot) else {
            return Err(Error::Config(format!("subgroup {} is not on the host", meta.id)));
        };
        let buf = self.pool.take(slot);
        self.pool.set(slot, SlotState::Flushing);
        let m = &mut self.meta[i];
        m.residency = Residency::InFlight;
        m.grads_on_host = false;
        self.record(EventKind::FlushEnqueue, Some(meta.id), Some(tier), 0);
        self.lanes.submit(
            tier,
            Job::Flush {
                local: i,
                slot,
                id: meta.id,
                iteration: self.iteration,
                stale: meta.file_on.filter(|&o| o != tier),
                buf,
            },
        );
        self.pending += 1;
        Ok(())
    }

    fn update_one(&mut self, i: usize, step: u64) -> Result<usize> {
        let slot = self.meta[i].slot.expect("host subgroup owns a slot");
        self.pool.set(slot, SlotState::Updating);
        let mut buf = self.pool.take(slot);
        let result = self.update_buffers(i, step, &mut buf);
        self.pool.put(slot, buf);
        self.pool.set(slot, SlotState::Ready);
        result
    }

    fn update_buffers(&mut self, i: usize, step: u64, buf: &mut SlotBuffers) -> Result<usize> {
        let Meta {
            id,
            len,
            grads_on_host,
            ..
        } = self.meta[i];
        let exec = self.cfg.exec;
        let bytes = len as u64;
        if self.cfg.flags.skip_gradients {
            self.record(EventKind::GradUpscaleStart, Some(id), None, 0);
            buf.grads.resize(len, 0.0);
            upscale_into(self.grads16[i].as_slice(), &mut buf.grads, exec)?;
            self.record(EventKind::GradUpscaleEnd, Some(id), None, 4 * bytes);
        } else if !grads_on_host && buf.grads.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                got: buf.grads.len(),
            });
        }
        self.record(EventKind::UpdateStart, Some(id), None, 0);
        adam_step_with(&mut buf.state, &buf.grads, &self.cfg.hyper, step, exec)?;
        self.record(EventKind::UpdateEnd, Some(id), None, 12 * bytes);
        self.record(EventKind::H2dStart, Some(id), None, 0);
        let overflow = downscale_into(&buf.state.params, &mut self.shadow[i], exec)?;
        self.record(EventKind::H2dEnd, Some(id), None, 2 * bytes);
        let m = &mut self.meta[i];
        m.step_count = step;
        m.grads_on_host = false;
        Ok(overflow)
    }

    fn poll(&mut self) -> Result<()> {
        while let Ok(done) = self.done_rx.try_recv() {
            self.complete(done)?;
        }
        Ok(())
    }

    fn wait_one(&mut self) -> Result<()> {
        if self.pending == 0 {
            return Err(Error::Config("waiting with no transfer outstanding".into()));
        }
        match self.done_rx.recv_timeout(self.cfg.stall_timeout) {
            Ok(done) => self.complete(done),
            Err(RecvTimeoutError::Timeout) => Err(Error::SchedulerStall(self.cfg.stall_timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Cancelled),
        }
    }

    /// Waits for a slot to come free; fails if nothing could free one.
    fn wait_for_progress(&mut self) -> Result<()> {
        if self.pending == 0 {
            return Err(Error::Config(format!(
                "all {} host slots are occupied by idle subgroups",
                self.pool.len()
            )));
        }
        self.wait_one()
    }

    /// Waits for every queued transfer.
    pub fn drain(&mut self) -> Result<()> {
        while self.pending > 0 {
            self.wait_one()?;
        }
        Ok(())
    }

    fn complete(&mut self, done: Done) -> Result<()> {
        self.pending -= 1;
        let tier = usize::from(done.tier);
        for &(dir, stats) in &done.transfers {
            let payload = stats.bytes.saturating_sub(HEADER_LEN as u64);
            match dir {
                crate::placement::Direction::Read => self.read_bytes[tier] += payload,
                crate::placement::Direction::Write => self.write_bytes[tier] += payload,
            }
            self.observations.push(Observation {
                tier,
                direction: dir,
                stats,
            });
        }
        let i = done.local;
        let ok = done.result.is_ok();
        match done.kind {
            JobKind::Prefetch => {
                let slot = done.slot.expect("prefetch carries its slot");
                self.pool.put(slot, done.buf.expect("prefetch returns its buffers"));
                if ok {
                    self.pool.set(slot, SlotState::Ready);
                    self.meta[i].residency = Residency::HostCached;
                } else {
                    self.pool.release(slot);
                    let m = &mut self.meta[i];
                    m.slot = None;
                    m.residency = Residency::OnTier(m.file_on.expect("fetched subgroup has a file"));
                }
            }
            JobKind::Flush => {
                let slot = done.slot.expect("flush carries its slot");
                self.pool.put(slot, done.buf.expect("flush returns its buffers"));
                let m = &mut self.meta[i];
                if ok {
                    self.pool.release(slot);
                    m.slot = None;
                    m.residency = Residency::OnTier(done.tier);
                    m.file_on = Some(done.tier);
                } else {
                    self.pool.set(slot, SlotState::Ready);
                    m.residency = Residency::HostCached;
                }
            }
            JobKind::GradFlush => {
                self.grad_inflight -= 1;
                self.spare_grads.extend(done.grads);
            }
        }
        done.result
    }

    /// Complete optimizer state of every subgroup, in subgroup order.
    pub fn snapshot(&mut self) -> Result<Vec<Subgroup>> {
        self.drain()?;
        let mut out = Vec::with_capacity(self.meta.len());
        for m in &self.meta {
            let mut sg = match (m.residency, m.slot) {
                (Residency::OnTier(t), _) => read_subgroup(&self.tiers[usize::from(t)], m.id)?.0,
                (Residency::HostCached, Some(slot)) => self
                    .pool
                    .buffers(slot)
                    .expect("host subgroup buffers present")
                    .state
                    .clone(),
                _ => unreachable!("drained engine has no subgroup in flight"),
            };
            sg.residency = m.residency;
            sg.step_count = m.step_count;
            out.push(sg);
        }
        Ok(out)
    }

    /// Deletes every state and gradient file this engine owns.
    pub fn remove_files(&mut self) -> Result<()> {
        self.drain()?;
        for m in &self.meta {
            for t in &self.tiers {
                t.remove(m.id, crate::tier::FileKind::State)?;
                t.remove(m.id, crate::tier::FileKind::Gradient)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(m: usize, ascending: bool) -> UpdatePlan {
        let order = UpdatePlan::order_for(m, ascending);
        let allocation = AllocationVector::single(m, 1);
        UpdatePlan {
            phase: 0,
            iteration: 1,
            ascending,
            destination: CachePlan::new(&order, &allocation, 0).unwrap(),
            order,
            origin: vec![Residency::OnTier(0); m],
            allocation,
        }
    }

    #[test]
    fn next_subgroup_follows_the_order() {
        assert_eq!(next_subgroup(2, &plan(4, true)), Some(3));
        assert_eq!(next_subgroup(3, &plan(4, true)), None);
        assert_eq!(next_subgroup(0, &plan(4, false)), None);
        assert_eq!(next_subgroup(3, &plan(4, false)), Some(2));
    }

    #[test]
    fn progressive_flags_add_one_switch_at_a_time() {
        let steps = Flags::progressive();
        assert_eq!(steps[0], Flags::BASELINE);
        assert_eq!(steps[4], Flags::ENGINE);
        assert!(steps[1].enable_caching && !steps[1].skip_gradients);
        assert!(steps[3].atomic_rw && !steps[3].multi_path);
        assert_eq!(steps[0].label(), "baseline");
        assert_eq!(steps[2].label(), "caching+skip-gradients");
    }

    #[test]
    fn ragged_split() {
        assert_eq!(EngineConfig::split(10, 4), vec![4, 4, 2]);
        assert_eq!(EngineConfig::split(8, 4), vec![4, 4]);
    }

    fn engine(m: usize, n: usize, flags: Flags, cache: usize) -> (Engine, tempfile::TempDir) {
        let locks = tempfile::tempdir().unwrap();
        let tiers = (0..n)
            .map(|k| Arc::new(Tier::mem_throttled(k as u16, 4e9, 4e9)))
            .collect();
        let mut cfg = EngineConfig::new(vec![1000; m]);
        cfg.flags = flags;
        cfg.pool_slots = 3;
        cfg.cache_slots = cache;
        cfg.seed = 9;
        let mut e = Engine::new(cfg, tiers, Arc::new(EventTrace::new()), Some(locks.path())).unwrap();
        e.initialize().unwrap();
        (e, locks)
    }

    #[test]
    fn single_subgroup_matches_direct_adam() {
        let _t = crate::testutil::timed();
        let (mut e, _l) = engine(1, 1, Flags::ENGINE, 0);
        let src = SeededGradients::new(1);
        e.run_backward_sim(1, &src).unwrap();
        e.run_update(1).unwrap();
        let got = e.snapshot().unwrap();

        let mut want = Subgroup::seeded(0, 1000, 9);
        let g16 = {
            let mut g = vec![f16::ZERO; 1000];
            src.fill(1, 0, 0, &mut g);
            g
        };
        let g: Vec<f32> = g16.iter().map(|v| v.to_f32()).collect();
        crate::optimizer::adam_step(&mut want, &g, &AdamHyper::default(), 1).unwrap();
        assert!(got[0].state_bits_eq(&want));
        assert_eq!(got[0].step_count, 1);
    }

    #[test]
    fn retained_subgroups_hit_in_the_next_phase() {
        let _t = crate::testutil::timed();
        let (mut e, _l) = engine(6, 2, Flags::ENGINE, 2);
        let src = SeededGradients::new(1);
        let mut hits = Vec::new();
        for it in 1..=4 {
            e.run_backward_sim(it, &src).unwrap();
            let r = e.run_update(it).unwrap();
            hits.push(r.cache_hits);
            assert_eq!(r.retained, 2);
            assert_eq!(e.distribution().host_params, 2000);
        }
        assert_eq!(hits, vec![0, 2, 2, 2]);
    }

    #[test]
    fn public_prefetch_api() {
        let _t = crate::testutil::timed();
        let (mut e, _l) = engine(2, 1, Flags::ENGINE, 0);
        assert!(e.async_f2h_prefetch(0).unwrap());
        assert!(!e.async_f2h_prefetch(0).unwrap());
        let sg = e.f2h_prefetch_wait_subgroup(0).unwrap();
        assert_eq!(sg.param_count(), 1000);
        // never enqueued: fetched synchronously
        assert_eq!(e.f2h_prefetch_wait_subgroup(1).unwrap().id, 1);
        e.async_h2f_flush(0, 0).unwrap();
        e.async_h2f_flush(1, 0).unwrap();
        e.drain().unwrap();
        assert_eq!(e.residency(0), Residency::OnTier(0));
        assert!(e.async_h2f_flush(0, 0).is_err());
    }

    #[test]
    fn config_is_validated() {
        let tiers = vec![Arc::new(Tier::mem_throttled(1, 1e9, 1e9))];
        let cfg = EngineConfig::new(vec![10]);
        assert!(Engine::new(cfg.clone(), tiers, Arc::new(EventTrace::new()), None).is_err());
        let tiers = vec![Arc::new(Tier::mem_throttled(0, 1e9, 1e9))];
        let mut small = cfg;
        small.pool_slots = 2;
        assert!(matches!(
            Engine::new(small, tiers, Arc::new(EventTrace::new()), None),
            Err(Error::Config(_))
        ));
    }
}
