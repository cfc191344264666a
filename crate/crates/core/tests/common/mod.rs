#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use tierflow::harness::config::{ModelConfig, PlacementConfig, ScheduleConfig};
use tierflow::harness::{RunConfig, TierConfig};
use tierflow::scheduler::{Engine, EngineConfig, Flags, SeededGradients};
use tierflow::tier::Tier;
use tierflow::{EventTrace, Subgroup, TierKind};

/// In-memory throttled tier description: (read B/s, write B/s, penalty).
pub type MemTier = (f64, f64, f64);

pub fn mem_run_config(
    tiers: &[MemTier],
    total_params: u64,
    subgroup_params: u64,
    iterations: u32,
    warmup: u32,
    lock_dir: &Path,
) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            total_params,
            subgroup_param_count: subgroup_params,
        },
        tiers: tiers
            .iter()
            .enumerate()
            .map(|(k, &(r, w, p))| TierConfig {
                id: k as u16,
                kind: TierKind::MemThrottled,
                root: None,
                read_bw: r,
                write_bw: w,
                io_parallelism: 1,
                persistent: false,
                contention_penalty: p,
                throttle: None,
                probe: false,
            })
            .collect(),
        placement: PlacementConfig::default(),
        optim: Default::default(),
        schedule: ScheduleConfig {
            iterations,
            warmup_iterations: warmup,
            lock_dir: Some(lock_dir.to_path_buf()),
            seed: 42,
            ..ScheduleConfig::default()
        },
    }
}

pub fn mem_tiers(tiers: &[MemTier]) -> Vec<Arc<Tier>> {
    tiers
        .iter()
        .enumerate()
        .map(|(k, &(r, w, p))| {
            Arc::new(Tier::mem_with(
                k as u16,
                tierflow::tier::ThrottleSpec {
                    read_bw: r,
                    write_bw: w,
                    contention_penalty: p,
                },
            ))
        })
        .collect()
}

/// Runs `iterations` full iterations directly on an engine and returns the
/// final state plus the trace.
pub fn run_engine(
    flags: Flags,
    sizes: Vec<usize>,
    tiers: &[MemTier],
    cache_slots: usize,
    iterations: u32,
    lock_dir: &Path,
) -> (Vec<Subgroup>, Arc<EventTrace>) {
    let mut cfg = EngineConfig::new(sizes);
    cfg.flags = flags;
    cfg.cache_slots = cache_slots;
    cfg.pool_slots = 3;
    cfg.seed = 42;
    let trace = Arc::new(EventTrace::new());
    let mut e = Engine::new(cfg, mem_tiers(tiers), Arc::clone(&trace), Some(lock_dir)).unwrap();
    e.initialize().unwrap();
    let src = SeededGradients::new(42);
    for it in 1..=iterations {
        let b = e.run_backward_sim(it, &src).unwrap();
        assert!(b.overflow.is_none());
        if flags == Flags::BASELINE {
            e.run_baseline_update(it).unwrap();
        } else {
            e.run_update(it).unwrap();
        }
    }
    (e.snapshot().unwrap(), trace)
}

pub fn states_bit_equal(a: &[Subgroup], b: &[Subgroup]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.state_bits_eq(y) && x.step_count == y.step_count)
}
