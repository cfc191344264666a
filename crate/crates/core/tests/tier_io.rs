use std::sync::{Arc, Mutex, MutexGuard};

use proptest::prelude::*;

use tierflow::optimizer::Subgroup;
use tierflow::tier::format::HEADER_LEN;
use tierflow::tier::{probe_bandwidth, read_subgroup, write_subgroup, Tier, TierLocks, TierSpec};
use tierflow::trace::lock_overlaps;
use tierflow::{EventTrace, TierKind};

static TIMED: Mutex<()> = Mutex::new(());

fn timed() -> MutexGuard<'static, ()> {
    TIMED.lock().unwrap_or_else(|e| e.into_inner())
}

fn dir_tier(root: &std::path::Path) -> Tier {
    Tier::dir(
        TierSpec {
            tier_id: 0,
            kind: TierKind::LocalDir,
            root: root.to_path_buf(),
            read_bw: 1e9,
            write_bw: 1e9,
            io_parallelism: 1,
            persistent: false,
        },
        None,
    )
    .unwrap()
}

fn subgroup(id: u32, bits: &[u32]) -> Subgroup {
    let mut sg = Subgroup::zeros(id, bits.len());
    for (k, &b) in bits.iter().enumerate() {
        sg.params[k] = f32::from_bits(b);
        sg.momentum[k] = f32::from_bits(b.rotate_left(7));
        sg.variance[k] = f32::from_bits(!b);
    }
    sg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_contents_round_trip_bitwise(id in 0u32..1_000_000, bits in prop::collection::vec(any::<u32>(), 0..2000)) {
        let sg = subgroup(id, &bits);
        let d = tempfile::tempdir().unwrap();
        for tier in [Tier::mem_throttled(0, 1e12, 1e12), dir_tier(d.path())] {
            let w = write_subgroup(&tier, &sg).unwrap();
            prop_assert_eq!(w.bytes, (12 * bits.len() + HEADER_LEN) as u64);
            let (back, _) = read_subgroup(&tier, id).unwrap();
            prop_assert!(back.state_bits_eq(&sg));
        }
    }
}

#[test]
fn payload_size_and_transfer_times_follow_the_throttle() {
    let _t = timed();
    // 100 MB subgroup (plus header) on a 200 MB/s read, 100 MB/s write tier.
    let tier = Tier::mem_throttled(0, 200e6, 100e6);
    let sg = Subgroup::zeros(4, 100_000_000 / 12);
    let w = write_subgroup(&tier, &sg).unwrap();
    let (_, r) = read_subgroup(&tier, 4).unwrap();
    assert_eq!(w.bytes, 12 * (100_000_000 / 12) + HEADER_LEN as u64);
    let ws = w.duration.as_secs_f64();
    let rs = r.duration.as_secs_f64();
    assert!((ws - 1.0).abs() <= 0.1, "write {ws:.3}s");
    assert!((rs - 0.5).abs() <= 0.05, "read {rs:.3}s");

    let small = Tier::mem_throttled(1, 80e6, 40e6);
    let sg = Subgroup::zeros(1, (4 << 20) / 12 + 1);
    let w = write_subgroup(&small, &sg).unwrap();
    let expect = w.bytes as f64 / 40e6;
    assert!((w.duration.as_secs_f64() / expect - 1.0).abs() <= 0.1);
}

#[test]
fn halving_the_throttle_halves_the_probe() {
    let _t = timed();
    let full = probe_bandwidth(&Tier::mem_throttled(0, 160e6, 80e6), 8 << 20, 3).unwrap();
    let half = probe_bandwidth(&Tier::mem_throttled(0, 80e6, 40e6), 8 << 20, 3).unwrap();
    for (a, b) in [(full.read_bw, half.read_bw), (full.write_bw, half.write_bw)] {
        assert!((b / a - 0.5).abs() <= 0.5 * 0.15, "{a:.3e} -> {b:.3e}");
    }
    assert!(!full.low_confidence && !half.low_confidence);
}

#[test]
fn lock_holders_across_threads_never_overlap_and_can_reacquire() {
    let _t = timed();
    let d = tempfile::tempdir().unwrap();
    let trace = Arc::new(EventTrace::new());
    let locks = TierLocks::new(d.path(), Arc::clone(&trace)).unwrap();
    std::thread::scope(|s| {
        for w in 0..3u32 {
            let locks = &locks;
            s.spawn(move || {
                for op in 0..30 {
                    let g = locks.acquire((op % 2) as u16, w, op).unwrap();
                    std::hint::black_box(&g);
                    drop(g);
                }
            });
        }
    });
    assert_eq!(trace.len(), 3 * 30 * 2);
    assert!(lock_overlaps(&trace.snapshot()).is_empty());
    assert!(d.path().join("tier_0.lock").exists() && d.path().join("tier_1.lock").exists());
}
