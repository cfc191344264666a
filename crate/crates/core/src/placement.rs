//! Bandwidth-proportional placement of subgroups across storage tiers.
//!
//! Every tier receives a share of the flushed subgroups proportional to its
//! effective bandwidth (the minimum of its read and write throughput), so
//! transfers on slow and fast tiers finish at roughly the same time. The
//! bandwidths start from microbenchmark values and are re-estimated from the
//! transfers observed in every update phase.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tier::IoStats;

/// Relative tolerance used when comparing per-subgroup service times.
const RATIO_EPS: f64 = 1e-12;

/// Number of subgroups allocated to each tier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationVector {
    pub counts: Vec<usize>,
}

impl AllocationVector {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Everything on tier 0 of `tiers`.
    pub fn single(total: usize, tiers: usize) -> Self {
        let mut counts = vec![0; tiers.max(1)];
        counts[0] = total;
        Self { counts }
    }

    /// Largest per-tier service time `T_i / B_i`; tiers with no bandwidth
    /// contribute nothing when empty and infinity otherwise.
    pub fn max_service_ratio(&self, bandwidths: &[f64]) -> f64 {
        self.counts
            .iter()
            .zip(bandwidths)
            .map(|(&t, &b)| service_ratio(t, b))
            .fold(0.0, f64::max)
    }
}

fn service_ratio(count: usize, bw: f64) -> f64 {
    match (count, bw > 0.0) {
        (0, _) => 0.0,
        (_, true) => count as f64 / bw,
        (_, false) => f64::INFINITY,
    }
}

fn cmp_ratio(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= RATIO_EPS * a.abs().max(b.abs()) {
        Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

/// Splits `m` subgroups across tiers with bandwidths `bandwidths`.
///
/// Each tier first gets `ceil(m * B_i / sum(B))`. While the total exceeds
/// `m`, one subgroup is taken from the tier with the largest `T_i / B_i`
/// (ties go to the higher tier index). A final exchange pass then moves
/// subgroups off the slowest tier while that helps, so the result minimizes
/// the largest per-tier service time over all allocations summing to `m`.
pub fn assign_subgroups(m: usize, bandwidths: &[f64]) -> Result<AllocationVector> {
    if bandwidths.iter().any(|b| !b.is_finite() || *b < 0.0) {
        return Err(Error::InvalidBandwidth);
    }
    let sum: f64 = bandwidths.iter().sum();
    if bandwidths.is_empty() || sum <= 0.0 {
        return Err(Error::InvalidBandwidth);
    }

    let mut counts: Vec<usize> = bandwidths
        .iter()
        .map(|&b| {
            let q = m as f64 * b / sum;
            let r = q.round();
            // A share that is integral up to rounding noise is not bumped.
            if (q - r).abs() <= 1e-9 * q.max(1.0) {
                r as usize
            } else {
                q.ceil() as usize
            }
        })
        .collect();

    let mut total: usize = counts.iter().sum();
    while total > m {
        let worst = (0..counts.len())
            .filter(|&i| counts[i] > 0 && bandwidths[i] > 0.0)
            .max_by(|&a, &b| {
                cmp_ratio(
                    counts[a] as f64 / bandwidths[a],
                    counts[b] as f64 / bandwidths[b],
                )
                .then(a.cmp(&b))
            })
            .expect("over-allocated vector has a non-empty tier");
        counts[worst] -= 1;
        total -= 1;
    }
    debug_assert_eq!(total, m);

    // Trimming the ceilings can leave a tier above the optimum when another
    // tier deserved more than its ceiling. Move single subgroups off the
    // slowest tier while that strictly lowers its service time; when no such
    // move exists the largest ratio is minimal.
    loop {
        let (k, worst) = (0..counts.len())
            .map(|i| (i, service_ratio(counts[i], bandwidths[i])))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("non-empty");
        let (j, next) = (0..counts.len())
            .filter(|&i| i != k)
            .map(|i| (i, service_ratio(counts[i] + 1, bandwidths[i])))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap_or((k, f64::INFINITY));
        if counts[k] == 0 || cmp_ratio(next, worst) != Ordering::Less {
            break;
        }
        counts[k] -= 1;
        counts[j] += 1;
    }
    Ok(AllocationVector { counts })
}

/// Direction of an observed transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Read,
    Write,
}

/// One transfer observed on tier `tier` during the last update phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub tier: usize,
    pub direction: Direction,
    pub stats: IoStats,
}

/// Smoothed per-tier read and write bandwidth in bytes/second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthEstimate {
    pub read_bw: Vec<f64>,
    pub write_bw: Vec<f64>,
    pub sample_count: Vec<u64>,
    pub alpha: f64,
}

impl BandwidthEstimate {
    pub fn new(read_bw: Vec<f64>, write_bw: Vec<f64>, alpha: f64) -> Result<Self> {
        if read_bw.len() != write_bw.len() {
            return Err(Error::LengthMismatch {
                expected: read_bw.len(),
                got: write_bw.len(),
            });
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("EMA alpha {alpha} outside (0, 1]")));
        }
        if read_bw.iter().chain(&write_bw).any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidBandwidth);
        }
        let n = read_bw.len();
        Ok(Self {
            read_bw,
            write_bw,
            sample_count: vec![0; n],
            alpha,
        })
    }

    pub fn tiers(&self) -> usize {
        self.read_bw.len()
    }

    pub fn effective_bw(&self, tier: usize) -> f64 {
        self.read_bw[tier].min(self.write_bw[tier])
    }

    pub fn effective(&self) -> Vec<f64> {
        (0..self.tiers()).map(|i| self.effective_bw(i)).collect()
    }
}

fn mean_throughput<'a>(samples: impl Iterator<Item = &'a Observation>) -> Option<f64> {
    let (sum, n) = samples
        .filter(|o| o.stats.duration.as_secs_f64() > 0.0 && o.stats.bytes > 0)
        .fold((0.0, 0usize), |(s, n), o| {
            (s + o.stats.bytes as f64 / o.stats.duration.as_secs_f64(), n + 1)
        });
    (n > 0).then(|| sum / n as f64)
}

/// Folds one phase worth of observed transfers into the estimate. Read and
/// write means are smoothed separately; tiers or directions without
/// observations keep their previous value.
pub fn update_bandwidth_estimates(
    est: &BandwidthEstimate,
    observed: &[Observation],
) -> BandwidthEstimate {
    let mut next = est.clone();
    let a = est.alpha;
    for tier in 0..est.tiers() {
        let on_tier = || observed.iter().filter(move |o| o.tier == tier);
        let reads = mean_throughput(on_tier().filter(|o| o.direction == Direction::Read));
        let writes = mean_throughput(on_tier().filter(|o| o.direction == Direction::Write));
        if let Some(r) = reads {
            next.read_bw[tier] = (1.0 - a) * est.read_bw[tier] + a * r;
        }
        if let Some(w) = writes {
            next.write_bw[tier] = (1.0 - a) * est.write_bw[tier] + a * w;
        }
        next.sample_count[tier] += on_tier().count() as u64;
    }
    next
}

/// Where an updated subgroup goes at the end of its update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Destination {
    /// Kept in a host cache slot; no flush.
    Retain,
    Tier(u16),
}

/// Flush destinations for one update phase, indexed by subgroup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CachePlan {
    destinations: Vec<Destination>,
}

impl CachePlan {
    /// The last `host_capacity` subgroups of `order` stay on the host. The
    /// rest are dealt out in update order to the tier with the largest
    /// fraction of its quota left, which interleaves tiers in proportion to
    /// `alloc` (ties go to the lower tier index).
    ///
    /// `alloc` must cover exactly the flushed subgroups.
    pub fn new(order: &[usize], alloc: &AllocationVector, host_capacity: usize) -> Result<Self> {
        let m = order.len();
        let retained = host_capacity.min(m);
        let flushed = m - retained;
        if alloc.total() != flushed {
            return Err(Error::LengthMismatch {
                expected: flushed,
                got: alloc.total(),
            });
        }
        let mut destinations = vec![Destination::Retain; m];
        let mut remaining = alloc.counts.clone();
        for &sg in &order[..flushed] {
            let tier = (0..remaining.len())
                .filter(|&t| remaining[t] > 0)
                .max_by(|&a, &b| {
                    // remaining[a] / quota[a] vs remaining[b] / quota[b]
                    (remaining[a] * alloc.counts[b])
                        .cmp(&(remaining[b] * alloc.counts[a]))
                        .then(b.cmp(&a))
                })
                .expect("quota covers every flushed subgroup");
            remaining[tier] -= 1;
            destinations[sg] = Destination::Tier(tier as u16);
        }
        Ok(Self { destinations })
    }

    pub fn destinations(&self) -> &[Destination] {
        &self.destinations
    }

    pub fn retained(&self) -> usize {
        self.destinations
            .iter()
            .filter(|d| **d == Destination::Retain)
            .count()
    }

    /// Per-tier count of flushed subgroups.
    pub fn tier_counts(&self, tiers: usize) -> Vec<usize> {
        let mut counts = vec![0; tiers];
        for d in &self.destinations {
            if let Destination::Tier(t) = d {
                counts[usize::from(*t)] += 1;
            }
        }
        counts
    }
}

/// Flush target of subgroup `subgroup` under `plan`.
pub fn assign_storage_tier(subgroup: usize, plan: &CachePlan) -> Destination {
    plan.destinations[subgroup]
}
