//! Acceptance criteria. Runs each criterion in turn and prints one PASS or
//! FAIL line per criterion; exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{mem_run_config, run_engine, states_bit_equal};
use tierflow::exec::Exec;
use tierflow::harness::lockcheck::{self, LockCheck};
use tierflow::harness::{run_benchmark, tier_busy, BenchOutcome, RunConfig, RunOptions, ThrottleChange};
use tierflow::optimizer::{adam_step_with, AdamHyper, Subgroup};
use tierflow::placement::assign_subgroups;
use tierflow::precision::{downscale_into, upscale_into};
use tierflow::scheduler::Flags;
use tierflow::trace::{cache_hits, lock_overlaps, pair_intervals, Span};
use tierflow::{Event, EventKind};

const MB: f64 = 1e6;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bench(cfg: &RunConfig, flags: Flags) -> BenchOutcome {
    let opts = RunOptions {
        flags: Some(flags),
        label: Some(flags.label()),
        ..RunOptions::default()
    };
    run_benchmark(cfg, &opts).expect("benchmark run")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// 1. Placement optimality

/// Exhaustive min over all allocations of `m` into `b.len()` tiers of the
/// largest `T_i / B_i`, using the same ratio table as the check below.
fn brute_force_min_max(m: usize, table: &[Vec<f64>]) -> f64 {
    fn go(tier: usize, left: usize, cur: f64, table: &[Vec<f64>], best: &mut f64) {
        if cur >= *best {
            return;
        }
        if tier + 1 == table.len() {
            *best = best.min(cur.max(table[tier][left]));
            return;
        }
        for k in 0..=left {
            go(tier + 1, left - k, cur.max(table[tier][k]), table, best);
        }
    }
    let mut best = f64::INFINITY;
    go(0, m, 0.0, table, &mut best);
    best
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0usize;
    for trial in 0..1000 {
        let n = 1 + trial % 4;
        let b: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.2) {
                    // Exact ties between tiers.
                    100.0
                } else {
                    10f64.powf(rng.random_range(0.0..3.0))
                }
            })
            .collect();
        let table: Vec<Vec<f64>> = b.iter().map(|&bi| (0..=64).map(|k| k as f64 / bi).collect()).collect();
        for m in 1..=64 {
            let alloc = assign_subgroups(m, &b).map_err(|e| format!("m={m} b={b:?}: {e}"))?;
            if alloc.total() != m {
                return Err(format!("m={m} b={b:?}: allocation sums to {}", alloc.total()));
            }
            let got = alloc
                .counts
                .iter()
                .zip(&table)
                .map(|(&t, row)| row[t])
                .fold(0.0, f64::max);
            let opt = brute_force_min_max(m, &table);
            // Equal up to the rounding of a single division.
            if (got - opt).abs() > 1e-12 * opt {
                return Err(format!("m={m} b={b:?}: max ratio {got} vs optimum {opt} ({:?})", alloc.counts));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} allocations match the exhaustive optimum"))
}

// ---------------------------------------------------------------------------
// 2. Optimizer correctness

/// Straight-line f64 Adam on one element, with the f32 hyperparameters
/// widened exactly.
fn adam_ref(p: f32, m: f32, v: f32, g: f32, h: &AdamHyper, t: u64) -> (f64, f64, f64) {
    let (lr, b1, b2, eps, wd) = (
        h.lr as f64,
        h.beta1 as f64,
        h.beta2 as f64,
        h.eps as f64,
        h.weight_decay as f64,
    );
    let g = g as f64;
    let mut p = p as f64;
    p -= lr * wd * p;
    let m = b1 * m as f64 + (1.0 - b1) * g;
    let v = b2 * v as f64 + (1.0 - b2) * g * g;
    let m_hat = m / (1.0 - b1.powi(t as i32));
    let v_hat = v / (1.0 - b2.powi(t as i32));
    p -= lr * m_hat / (v_hat.sqrt() + eps);
    (p, m, v)
}

fn rel(got: f32, want: f64) -> f64 {
    if want == 0.0 {
        (got as f64).abs()
    } else {
        ((got as f64 - want) / want).abs()
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let mut worst = [0.0f64; 3];
    for trial in 0..100 {
        let h = AdamHyper {
            weight_decay: if trial % 2 == 0 { 0.0 } else { 0.01 },
            ..AdamHyper::default()
        };
        let t = rng.random_range(1..=1000u64);
        let mut sg = Subgroup::zeros(trial, n);
        let mut g = vec![0.0f32; n];
        for k in 0..n {
            // Parameters spread over two decades. Momentum and gradient share
            // a sign and the variance dominates their squares, as in state
            // Adam itself produces, so steps stay below lr.
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sg.params[k] = s * 10f32.powf(rng.random_range(-2.0..0.0));
            let d = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sg.momentum[k] = d * rng.random_range(0.0..1e-2);
            g[k] = d * rng.random_range(1e-4..1e-1);
            sg.variance[k] = rng.random_range(1.0..4.0) * (sg.momentum[k].powi(2) + g[k].powi(2));
        }
        let before = sg.clone();
        adam_step_with(&mut sg, &g, &h, t, Exec::default()).map_err(|e| e.to_string())?;
        for k in 0..n {
            let (p, m, v) = adam_ref(before.params[k], before.momentum[k], before.variance[k], g[k], &h, t);
            worst[0] = worst[0].max(rel(sg.params[k], p));
            worst[1] = worst[1].max(rel(sg.momentum[k], m));
            worst[2] = worst[2].max(rel(sg.variance[k], v));
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    check(
        max <= 1e-6,
        format!(
            "max relative error p {:.2e} m {:.2e} v {:.2e} (limit 1e-6)",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Precision round trip

/// Value of an FP16 bit pattern, decoded field by field.
fn decode_f16(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = i32::from((bits >> 10) & 0x1f);
    let frac = f64::from(bits & 0x3ff);
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 => unreachable!("finite patterns only"),
        e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
    }
}

fn criterion_3() -> Outcome {
    let finite: Vec<u16> = (0..=u16::MAX).filter(|b| (b >> 10) & 0x1f != 0x1f).collect();
    let src: Vec<f16> = finite.iter().map(|&b| f16::from_bits(b)).collect();
    let mut wide = vec![0.0f32; src.len()];
    upscale_into(&src, &mut wide, Exec::default()).map_err(|e| e.to_string())?;
    let mut back = vec![f16::ZERO; src.len()];
    let overflow = downscale_into(&wide, &mut back, Exec::default()).map_err(|e| e.to_string())?;
    for (k, &bits) in finite.iter().enumerate() {
        if f64::from(wide[k]) != decode_f16(bits) || (decode_f16(bits) == 0.0 && wide[k].is_sign_negative() != (bits >> 15 == 1)) {
            return Err(format!("upscale of {bits:#06x} gave {}", wide[k]));
        }
        if back[k].to_bits() != bits {
            return Err(format!("{bits:#06x} came back as {:#06x}", back[k].to_bits()));
        }
    }
    check(
        overflow == 0,
        format!("{} finite FP16 patterns round-trip bit-exactly", finite.len()),
    )
}

// ---------------------------------------------------------------------------
// 4. Mode equivalence

fn criterion_4(lock_dir: &Path) -> Outcome {
    let sizes = vec![10_000; 12];
    let tiers = [(4e9, 4e9, 0.0), (2e9, 2e9, 0.0)];
    let (engine, _) = run_engine(Flags::ENGINE, sizes.clone(), &tiers, 4, 5, lock_dir);
    let (baseline, _) = run_engine(Flags::BASELINE, sizes, &tiers, 0, 5, lock_dir);
    let moved = engine.iter().zip(&baseline).all(|(e, b)| e.step_count == 5 && b.step_count == 5);
    check(
        moved && states_bit_equal(&engine, &baseline),
        "engine and baseline states are bitwise identical after 5 iterations".into(),
    )
}

// ---------------------------------------------------------------------------
// 5. Cache reuse

fn criterion_5(lock_dir: &Path) -> Outcome {
    let mut cfg = mem_run_config(&[(4e9, 4e9, 0.0), (2e9, 2e9, 0.0)], 120_000, 10_000, 5, 0, lock_dir);
    cfg.schedule.cache_slots = 4;
    let engine = bench(&cfg, Flags::ENGINE);
    let base = bench(&cfg, Flags::BASELINE);
    let eh = cache_hits(&engine.events);
    let bh = cache_hits(&base.events);
    let per_iter: Vec<usize> = (1..=5).map(|it| eh.get(&(0, it)).copied().unwrap_or(0)).collect();
    let ok = per_iter[0] == 0 && per_iter[1..].iter().all(|&h| h == 4) && bh.is_empty();
    check(
        ok,
        format!("engine hits per iteration {per_iter:?}, baseline hits {}", bh.values().sum::<usize>()),
    )
}

// ---------------------------------------------------------------------------
// 6. Gradient offload elimination

fn backward_tier_writes(events: &[Event]) -> BTreeMap<u32, u64> {
    let mut out = BTreeMap::new();
    for iv in pair_intervals(events).intervals {
        if iv.span == Span::GradFlush {
            *out.entry(iv.iteration).or_insert(0) += iv.bytes;
        }
    }
    out
}

fn criterion_6(lock_dir: &Path) -> Outcome {
    let (p, m) = (10_000u64, 12u64);
    let cfg = mem_run_config(&[(4e9, 4e9, 0.0)], p * m, p, 3, 0, lock_dir);
    let engine = bench(&cfg, Flags::ENGINE);
    let base = bench(&cfg, Flags::BASELINE);
    let ew = backward_tier_writes(&engine.events);
    let bw = backward_tier_writes(&base.events);
    let want = 4 * p * m;
    let base_ok = (1..=3).all(|it| bw.get(&it) == Some(&want));
    check(
        ew.values().all(|&b| b == 0) && base_ok,
        format!(
            "backward tier writes engine {} B, baseline {:?} B per iteration (expect {want})",
            ew.values().sum::<u64>(),
            bw.values().collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Lock exclusivity

fn criterion_7(lock_dir: &Path) -> Outcome {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let lc = LockCheck {
        dir: scratch.path().to_path_buf(),
        workers: 4,
        tiers: 2,
        ops: 200,
        hold: Duration::from_micros(100),
    };
    let threads = lockcheck::run_threads(&lc).map_err(|e| e.to_string())?;
    let procs = lockcheck::run_processes(&lc, Path::new(env!("CARGO_BIN_EXE_bench"))).map_err(|e| e.to_string())?;

    let mut cfg = mem_run_config(&[(1e9, 1e9, 0.0), (5e8, 5e8, 0.0)], 4 * 80_000, 10_000, 3, 0, lock_dir);
    cfg.schedule.workers_per_node = 4;
    let engine = bench(&cfg, Flags::ENGINE);

    let holds = |ev: &[Event]| pair_intervals(ev).intervals.iter().filter(|i| i.span == Span::LockHeld).count();
    let counts = [holds(&threads), holds(&procs), holds(&engine.events)];
    let overlaps = [
        lock_overlaps(&threads).len(),
        lock_overlaps(&procs).len(),
        lock_overlaps(&engine.events).len(),
    ];
    check(
        counts[0] == 800 && counts[1] == 800 && counts[2] > 0 && overlaps == [0, 0, 0],
        format!("lock holds threads/processes/engine {counts:?}, overlapping pairs {overlaps:?}"),
    )
}

// ---------------------------------------------------------------------------
// 8. Multi-path throughput, 9. tier completion balance

struct MultiPath {
    engine: BenchOutcome,
    single: BenchOutcome,
}

fn multipath_runs(lock_dir: &Path) -> MultiPath {
    let p = 1_000_000u64;
    let cfg = mem_run_config(&[(200.0 * MB, 200.0 * MB, 0.0), (100.0 * MB, 100.0 * MB, 0.0)], 12 * p, p, 3, 1, lock_dir);
    let engine = bench(&cfg, Flags::ENGINE);
    let mut single_cfg = cfg.clone();
    single_cfg.tiers.truncate(1);
    let single = bench(
        &single_cfg,
        Flags {
            multi_path: false,
            ..Flags::ENGINE
        },
    );
    MultiPath { engine, single }
}

fn criterion_8(runs: &MultiPath) -> Outcome {
    let e = runs.engine.summary.mean_update_s;
    let s = runs.single.summary.mean_update_s;
    let ratio = e / s;
    check(
        ratio <= 0.667 * 1.15,
        format!("update {e:.3}s vs single-tier {s:.3}s, ratio {ratio:.3} (limit {:.3})", 0.667 * 1.15),
    )
}

fn criterion_9(runs: &MultiPath) -> Outcome {
    let out = &runs.engine;
    let measured: Vec<u32> = out.iterations.iter().filter(|r| r.measured).map(|r| r.iteration).collect();
    let mut worst = 0.0f64;
    let mut shown = Vec::new();
    for &it in &measured {
        let busy: Vec<f64> = tier_busy(&out.events, it, 2).iter().map(Duration::as_secs_f64).collect();
        let hi = busy.iter().cloned().fold(0.0, f64::max);
        let lo = busy.iter().cloned().fold(f64::INFINITY, f64::min);
        let spread = (hi - lo) / hi;
        worst = worst.max(spread);
        shown.push(format!("{busy:.3?}"));
    }
    check(
        !measured.is_empty() && worst <= 0.25,
        format!("per-tier busy seconds {} , worst spread {:.1}% (limit 25%)", shown.join(" "), worst * 100.0),
    )
}

// ---------------------------------------------------------------------------
// 10. Ablation monotonicity

fn criterion_10(lock_dir: &Path) -> Outcome {
    let p = 262_144u64;
    let mut cfg = mem_run_config(
        &[(200.0 * MB, 200.0 * MB, 0.3), (100.0 * MB, 100.0 * MB, 0.3)],
        2 * 8 * p,
        p,
        4,
        1,
        lock_dir,
    );
    cfg.schedule.workers_per_node = 2;
    cfg.schedule.cache_slots = 2;
    let times: Vec<(String, f64)> = Flags::progressive()
        .iter()
        .map(|&f| (f.label(), bench(&cfg, f).summary.mean_update_s))
        .collect();
    let monotone = times.windows(2).all(|w| w[1].1 <= w[0].1 * 1.05);
    let fastest = times.iter().all(|t| times[4].1 <= t.1 * 1.05);
    let shown: Vec<String> = times.iter().map(|(l, t)| format!("{l} {t:.3}s")).collect();
    check(monotone && fastest, shown.join(", "))
}

// ---------------------------------------------------------------------------
// 11. Adaptive rebalance

fn criterion_11(lock_dir: &Path) -> Outcome {
    let p = 262_144u64;
    let mut cfg = mem_run_config(&[(200.0 * MB, 200.0 * MB, 0.0), (200.0 * MB, 200.0 * MB, 0.0)], 12 * p, p, 6, 0, lock_dir);
    let drop_at = 3;
    cfg.schedule.throttle_changes = vec![ThrottleChange {
        iteration: drop_at,
        tier: 1,
        read_bw: 50.0 * MB,
        write_bw: 50.0 * MB,
    }];
    cfg.placement.alpha = 0.5;
    let out = bench(&cfg, Flags::ENGINE);
    let alloc: Vec<Vec<usize>> = out.iterations.iter().map(|r| r.allocation.clone()).collect();
    let before = alloc[drop_at as usize - 1][1];
    let ok = alloc[drop_at as usize..=drop_at as usize + 1].iter().any(|a| a[1] < before);
    check(ok, format!("tier-1 share by iteration {:?}, drop at iteration {drop_at}", alloc.iter().map(|a| a[1]).collect::<Vec<_>>()))
}

// ---------------------------------------------------------------------------
// 12. Effective I/O metric

/// Mean of `2·size / (t_read + t_write)` per subgroup, straight from the
/// raw start and end events.
fn hand_effective_io(events: &[Event], iteration: u32) -> Option<f64> {
    let mut t: BTreeMap<(u32, u32), [Option<u64>; 4]> = BTreeMap::new();
    let mut size: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for e in events.iter().filter(|e| e.iteration == iteration) {
        let Some(sg) = e.subgroup_id else { continue };
        let slot = match e.kind {
            EventKind::PrefetchStart => 0,
            EventKind::PrefetchEnd => 1,
            EventKind::FlushStart => 2,
            EventKind::FlushEnd => 3,
            _ => continue,
        };
        t.entry((e.worker_id, sg)).or_default()[slot] = Some(e.timestamp_ns);
        if e.kind == EventKind::FlushEnd {
            size.insert((e.worker_id, sg), e.bytes);
        }
    }
    let rates: Vec<f64> = t
        .iter()
        .filter_map(|(key, ts)| {
            let [Some(a), Some(b), Some(c), Some(d)] = *ts else { return None };
            let secs = ((b - a) + (d - c)) as f64 / 1e9;
            Some(2.0 * size[key] as f64 / secs)
        })
        .collect();
    (!rates.is_empty()).then(|| mean(rates))
}

fn criterion_12(lock_dir: &Path) -> Outcome {
    let p = 262_144u64;
    let cfg = mem_run_config(&[(200.0 * MB, 200.0 * MB, 0.0), (100.0 * MB, 100.0 * MB, 0.0)], 8 * p, p, 3, 0, lock_dir);
    let out = bench(&cfg, Flags::ENGINE);
    let mut worst = 0.0f64;
    let mut shown = Vec::new();
    for r in out.iterations.iter().filter(|r| r.iteration > 1) {
        let reported = r.effective_io_bps.ok_or("no effective I/O reported")?;
        let hand = hand_effective_io(&out.events, r.iteration).ok_or("no complete subgroup transfers")?;
        worst = worst.max(((reported - hand) / hand).abs());
        shown.push(format!("{:.1} MB/s", reported / MB));
    }
    check(
        !shown.is_empty() && worst <= 1e-9,
        format!("reported {} matches the trace within {worst:.1e}", shown.join(", ")),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let lock_dir = tempfile::tempdir().expect("lock dir");
    let ld = lock_dir.path();
    let mut multipath: Option<MultiPath> = None;
    let mut failed = 0;
    let mut out = std::io::stdout();
    let started = Instant::now();
    for n in 1..=12u32 {
        let t0 = Instant::now();
        let name = [
            "placement optimality",
            "optimizer correctness",
            "precision round trip",
            "mode equivalence",
            "cache reuse",
            "gradient offload elimination",
            "lock exclusivity",
            "multi-path throughput",
            "tier completion balance",
            "ablation monotonicity",
            "adaptive rebalance",
            "effective I/O metric",
        ][n as usize - 1];
        let res = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(ld),
            5 => criterion_5(ld),
            6 => criterion_6(ld),
            7 => criterion_7(ld),
            8 | 9 => {
                let runs = multipath.get_or_insert_with(|| multipath_runs(ld));
                if n == 8 {
                    criterion_8(runs)
                } else {
                    criterion_9(runs)
                }
            }
            10 => criterion_10(ld),
            11 => criterion_11(ld),
            _ => criterion_12(ld),
        }))
        .unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let (tag, detail) = match res {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(
            out,
            "criterion {n:>2} {name:<30} {tag}  {detail}  [{:.1}s]",
            t0.elapsed().as_secs_f64()
        );
    }
    let _ = writeln!(
        out,
        "acceptance: {} passed, {failed} failed in {:.1}s",
        12 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
