//! Append-only event trace of one run.
//!
//! Every transfer, update, lock hold and phase boundary is recorded with a
//! nanosecond timestamp relative to the trace epoch. All metrics of an
//! iteration and all scheduling invariants are computed from these events.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, BufRead, Write};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PrefetchEnqueue,
    PrefetchStart,
    PrefetchEnd,
    FlushEnqueue,
    FlushStart,
    FlushEnd,
    UpdateStart,
    UpdateEnd,
    LockAcquire,
    LockRelease,
    H2dStart,
    H2dEnd,
    GradUpscaleStart,
    GradUpscaleEnd,
    GradFlushStart,
    GradFlushEnd,
    CacheHit,
    BackwardStart,
    BackwardEnd,
    UpdatePhaseStart,
    UpdatePhaseEnd,
}

/// Interval families formed by matching start and end events.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Span {
    Prefetch,
    Flush,
    Update,
    LockHeld,
    H2d,
    GradUpscale,
    GradFlush,
    Backward,
    UpdatePhase,
}

impl EventKind {
    /// `(span, is_start)` for interval events.
    pub fn span(self) -> Option<(Span, bool)> {
        use EventKind::*;
        Some(match self {
            PrefetchStart => (Span::Prefetch, true),
            PrefetchEnd => (Span::Prefetch, false),
            FlushStart => (Span::Flush, true),
            FlushEnd => (Span::Flush, false),
            UpdateStart => (Span::Update, true),
            UpdateEnd => (Span::Update, false),
            LockAcquire => (Span::LockHeld, true),
            LockRelease => (Span::LockHeld, false),
            H2dStart => (Span::H2d, true),
            H2dEnd => (Span::H2d, false),
            GradUpscaleStart => (Span::GradUpscale, true),
            GradUpscaleEnd => (Span::GradUpscale, false),
            GradFlushStart => (Span::GradFlush, true),
            GradFlushEnd => (Span::GradFlush, false),
            BackwardStart => (Span::Backward, true),
            BackwardEnd => (Span::Backward, false),
            UpdatePhaseStart => (Span::UpdatePhase, true),
            UpdatePhaseEnd => (Span::UpdatePhase, false),
            PrefetchEnqueue | FlushEnqueue | CacheHit => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp_ns: u64,
    pub worker_id: u32,
    pub kind: EventKind,
    pub iteration: u32,
    pub subgroup_id: Option<u32>,
    pub tier_id: Option<u16>,
    pub bytes: u64,
}

#[derive(Debug)]
pub struct EventTrace {
    epoch: Instant,
    offset_ns: u64,
    events: Mutex<Vec<Event>>,
}

impl Default for EventTrace {
    fn default() -> Self {
        Self::new()
    }
}

/// Nanoseconds since the Unix epoch.
pub fn unix_now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

impl EventTrace {
    pub fn new() -> Self {
        Self {
            epoch: Instant::now(),
            offset_ns: 0,
            events: Mutex::new(Vec::new()),
        }
    }

    /// A trace whose timestamps count from `parent_epoch_unix_ns`, so traces
    /// recorded by separate processes share one time axis.
    pub fn aligned_to(parent_epoch_unix_ns: u64) -> Self {
        Self {
            epoch: Instant::now(),
            offset_ns: unix_now_ns().saturating_sub(parent_epoch_unix_ns),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn now_ns(&self) -> u64 {
        self.offset_ns + self.epoch.elapsed().as_nanos() as u64
    }

    pub fn record(
        &self,
        worker_id: u32,
        kind: EventKind,
        iteration: u32,
        subgroup_id: Option<u32>,
        tier_id: Option<u16>,
        bytes: u64,
    ) -> u64 {
        let mut events = self.events.lock().unwrap();
        let timestamp_ns = self.now_ns();
        events.push(Event {
            timestamp_ns,
            worker_id,
            kind,
            iteration,
            subgroup_id,
            tier_id,
            bytes,
        });
        timestamp_ns
    }

    pub fn extend(&self, other: impl IntoIterator<Item = Event>) {
        self.events.lock().unwrap().extend(other);
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All events ordered by timestamp (stable for equal timestamps).
    pub fn snapshot(&self) -> Vec<Event> {
        let mut v = self.events.lock().unwrap().clone();
        v.sort_by_key(|e| e.timestamp_ns);
        v
    }

    /// Events recorded since `from` (an index into the append order).
    pub fn since(&self, from: usize) -> Vec<Event> {
        let mut v = self.events.lock().unwrap()[from..].to_vec();
        v.sort_by_key(|e| e.timestamp_ns);
        v
    }
}

pub fn write_ndjson(events: &[Event], mut out: impl Write) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_ndjson(input: impl BufRead) -> io::Result<Vec<Event>> {
    let mut events = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(io::Error::other)?);
    }
    Ok(events)
}

pub fn write_csv(events: &[Event], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "timestamp_ns,worker_id,kind,iteration,subgroup_id,tier_id,bytes")?;
    for e in events {
        let kind = serde_json::to_value(e.kind)?;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.timestamp_ns,
            e.worker_id,
            kind.as_str().unwrap_or_default(),
            e.iteration,
            e.subgroup_id.map(|v| v.to_string()).unwrap_or_default(),
            e.tier_id.map(|v| v.to_string()).unwrap_or_default(),
            e.bytes,
        )?;
    }
    out.flush()
}

/// A matched start/end pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    pub span: Span,
    pub worker_id: u32,
    pub iteration: u32,
    pub subgroup_id: Option<u32>,
    pub tier_id: Option<u16>,
    pub start_ns: u64,
    pub end_ns: u64,
    /// Bytes carried by the end event.
    pub bytes: u64,
}

impl Interval {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start_ns < other.end_ns && other.start_ns < self.end_ns
    }
}

/// Result of matching starts with ends.
#[derive(Clone, Debug, Default)]
pub struct Pairing {
    pub intervals: Vec<Interval>,
    pub unmatched_starts: usize,
    pub unmatched_ends: usize,
}

/// Matches start and end events per `(worker, span, subgroup, tier)` in
/// timestamp order.
pub fn pair_intervals(events: &[Event]) -> Pairing {
    type Key = (u32, Span, Option<u32>, Option<u16>);
    let mut open: HashMap<Key, VecDeque<&Event>> = HashMap::new();
    let mut out = Pairing::default();
    let mut sorted: Vec<&Event> = events.iter().collect();
    sorted.sort_by_key(|e| e.timestamp_ns);
    for e in sorted {
        let Some((span, is_start)) = e.kind.span() else {
            continue;
        };
        let key = (e.worker_id, span, e.subgroup_id, e.tier_id);
        if is_start {
            open.entry(key).or_default().push_back(e);
        } else if let Some(s) = open.get_mut(&key).and_then(|q| q.pop_front()) {
            out.intervals.push(Interval {
                span,
                worker_id: e.worker_id,
                iteration: s.iteration,
                subgroup_id: e.subgroup_id,
                tier_id: e.tier_id,
                start_ns: s.timestamp_ns,
                end_ns: e.timestamp_ns,
                bytes: e.bytes,
            });
        } else {
            out.unmatched_ends += 1;
        }
    }
    out.unmatched_starts = open.values().map(VecDeque::len).sum();
    out
}

/// Pairs of lock-hold intervals on the same tier that overlap in time.
pub fn lock_overlaps(events: &[Event]) -> Vec<(Interval, Interval)> {
    let mut by_tier: BTreeMap<Option<u16>, Vec<Interval>> = BTreeMap::new();
    for iv in pair_intervals(events).intervals {
        if iv.span == Span::LockHeld {
            by_tier.entry(iv.tier_id).or_default().push(iv);
        }
    }
    let mut bad = Vec::new();
    for ivs in by_tier.values_mut() {
        ivs.sort_by_key(|iv| iv.start_ns);
        // After sorting by start, any overlap shows up against the interval
        // with the furthest end seen so far.
        let mut reach: Option<Interval> = None;
        for iv in ivs.iter() {
            if let Some(r) = reach {
                if r.overlaps(iv) {
                    bad.push((r, *iv));
                }
                if iv.end_ns > r.end_ns {
                    reach = Some(*iv);
                }
            } else {
                reach = Some(*iv);
            }
        }
    }
    bad
}

/// True if some instant has a prefetch, an update and a flush all in flight
/// for worker `worker_id`.
pub fn has_triple_overlap(events: &[Event], worker_id: u32) -> bool {
    let ivs: Vec<Interval> = pair_intervals(events)
        .intervals
        .into_iter()
        .filter(|iv| iv.worker_id == worker_id)
        .collect();
    let of = |s: Span| ivs.iter().filter(move |iv| iv.span == s);
    of(Span::Update).any(|u| {
        of(Span::Prefetch).filter(|p| p.overlaps(u)).any(|p| {
            let lo = p.start_ns.max(u.start_ns);
            let hi = p.end_ns.min(u.end_ns);
            of(Span::Flush).any(|f| f.start_ns < hi && lo < f.end_ns)
        })
    })
}

/// Number of cache-hit events per `(worker, iteration)`.
pub fn cache_hits(events: &[Event]) -> BTreeMap<(u32, u32), usize> {
    let mut hits = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::CacheHit) {
        *hits.entry((e.worker_id, e.iteration)).or_insert(0) += 1;
    }
    hits
}
