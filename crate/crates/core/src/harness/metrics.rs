//! Metrics derived from the event trace.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::trace::{pair_intervals, Event, Interval, Span};

/// Transfers of one subgroup during one update phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IoSample {
    pub worker_id: u32,
    pub subgroup_id: u32,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub read_s: f64,
    pub write_s: f64,
}

/// Mean over transferred subgroups of bytes moved per second of transfer
/// time. For a subgroup read and written in full this is
/// `2 * size / (t_read + t_write)`. Subgroups without I/O are skipped;
/// `None` when nothing was transferred.
pub fn effective_io_throughput(samples: &[IoSample]) -> Option<f64> {
    let rates: Vec<f64> = samples
        .iter()
        .filter(|s| s.read_s + s.write_s > 0.0)
        .map(|s| (s.read_bytes + s.write_bytes) as f64 / (s.read_s + s.write_s))
        .collect();
    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
}

fn update_io(intervals: &[Interval], iteration: u32) -> impl Iterator<Item = &Interval> {
    intervals.iter().filter(move |iv| {
        iv.iteration == iteration && matches!(iv.span, Span::Prefetch | Span::Flush)
    })
}

/// Per-subgroup update-phase transfers of `iteration`, ordered by worker
/// and subgroup.
pub fn io_samples(events: &[Event], iteration: u32) -> Vec<IoSample> {
    let intervals = pair_intervals(events).intervals;
    let mut by_sg: BTreeMap<(u32, u32), IoSample> = BTreeMap::new();
    for iv in update_io(&intervals, iteration) {
        let Some(sg) = iv.subgroup_id else { continue };
        let s = by_sg.entry((iv.worker_id, sg)).or_insert(IoSample {
            worker_id: iv.worker_id,
            subgroup_id: sg,
            ..IoSample::default()
        });
        let secs = iv.duration_ns() as f64 * 1e-9;
        match iv.span {
            Span::Prefetch => {
                s.read_bytes += iv.bytes;
                s.read_s += secs;
            }
            _ => {
                s.write_bytes += iv.bytes;
                s.write_s += secs;
            }
        }
    }
    by_sg.into_values().collect()
}

/// Time each tier had at least one update-phase transfer running during
/// `iteration`.
pub fn tier_busy(events: &[Event], iteration: u32, tiers: usize) -> Vec<Duration> {
    let intervals = pair_intervals(events).intervals;
    (0..tiers)
        .map(|t| {
            let mut spans: Vec<(u64, u64)> = update_io(&intervals, iteration)
                .filter(|iv| iv.tier_id == Some(t as u16))
                .map(|iv| (iv.start_ns, iv.end_ns))
                .collect();
            Duration::from_nanos(union_length(&mut spans))
        })
        .collect()
}

fn union_length(spans: &mut [(u64, u64)]) -> u64 {
    spans.sort_unstable();
    let mut total = 0;
    let mut current: Option<(u64, u64)> = None;
    for &(s, e) in spans.iter() {
        match current {
            Some((cs, ce)) if s <= ce => current = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                current = Some((s, e));
            }
            None => current = Some((s, e)),
        }
    }
    total + current.map_or(0, |(s, e)| e - s)
}

/// `(max - min) / max`; zero for an empty or idle set.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() || max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}
