//! Storage tiers: local and remote directories, and rate-limited in-memory
//! stores standing in for devices of known speed.

pub mod format;
pub mod lock;
pub mod throttle;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::Subgroup;
use crate::placement::Direction;
pub use lock::{TierLockGuard, TierLocks};
pub use throttle::Throttle;

/// Sub-chunk size for direct file transfers.
const FILE_CHUNK: usize = 1 << 20;
/// Durations below this are treated as unmeasurable.
const TIMER_RESOLUTION: Duration = Duration::from_micros(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierKind {
    LocalDir,
    RemoteDir,
    MemThrottled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub tier_id: u16,
    pub kind: TierKind,
    /// Directory for `*_dir` tiers; a label for in-memory tiers.
    pub root: PathBuf,
    /// Bytes per second.
    pub read_bw: f64,
    pub write_bw: f64,
    pub io_parallelism: usize,
    pub persistent: bool,
}

/// Rate limit applied to a tier's transfers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThrottleSpec {
    pub read_bw: f64,
    pub write_bw: f64,
    #[serde(default)]
    pub contention_penalty: f64,
}

/// Which file of a subgroup a transfer touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FileKind {
    /// Params, momentum and variance.
    State,
    /// FP32 gradients flushed during backward (baseline data flow).
    Gradient,
    Probe,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IoStats {
    pub bytes: u64,
    #[serde(with = "duration_secs")]
    pub duration: Duration,
}

impl IoStats {
    pub fn throughput(&self) -> f64 {
        self.bytes as f64 / self.duration.max(TIMER_RESOLUTION).as_secs_f64()
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

type MemFiles = HashMap<(u32, FileKind), Arc<Vec<u8>>>;

#[derive(Debug)]
enum Backend {
    Dir,
    Mem(Mutex<MemFiles>),
}

/// A storage backend plus its bandwidth description.
#[derive(Debug)]
pub struct Tier {
    spec: TierSpec,
    backend: Backend,
    throttle: Option<Throttle>,
}

impl Tier {
    /// In-memory tier limited to the given rates.
    pub fn mem_throttled(tier_id: u16, read_bw: f64, write_bw: f64) -> Self {
        Self::mem_with(
            tier_id,
            ThrottleSpec {
                read_bw,
                write_bw,
                contention_penalty: 0.0,
            },
        )
    }

    pub fn mem_with(tier_id: u16, throttle: ThrottleSpec) -> Self {
        Self {
            spec: TierSpec {
                tier_id,
                kind: TierKind::MemThrottled,
                root: PathBuf::from(format!("mem:{tier_id}")),
                read_bw: throttle.read_bw,
                write_bw: throttle.write_bw,
                io_parallelism: 1,
                persistent: false,
            },
            backend: Backend::Mem(Mutex::new(HashMap::new())),
            throttle: Some(Throttle::new(
                throttle.read_bw,
                throttle.write_bw,
                throttle.contention_penalty,
            )),
        }
    }

    /// Directory-backed tier. `throttle` optionally caps its speed further.
    pub fn dir(spec: TierSpec, throttle: Option<ThrottleSpec>) -> Result<Self> {
        if spec.kind == TierKind::MemThrottled {
            return Err(Error::Config("mem_throttled tiers are built with Tier::mem_with".into()));
        }
        if spec.io_parallelism == 0 {
            return Err(Error::Config(format!("tier {}: io_parallelism must be >= 1", spec.tier_id)));
        }
        fs::create_dir_all(&spec.root).map_err(|e| Error::io(spec.tier_id, e))?;
        Ok(Self {
            throttle: throttle
                .map(|t| Throttle::new(t.read_bw, t.write_bw, t.contention_penalty)),
            spec,
            backend: Backend::Dir,
        })
    }

    pub fn spec(&self) -> &TierSpec {
        &self.spec
    }

    pub fn id(&self) -> u16 {
        self.spec.tier_id
    }

    pub fn throttle(&self) -> Option<&Throttle> {
        self.throttle.as_ref()
    }

    /// `<root>/sg_<id:06>.bin` (gradients: `sg_<id:06>.grad.bin`).
    pub fn path_for(&self, subgroup_id: u32, kind: FileKind) -> PathBuf {
        let name = match kind {
            FileKind::State => format!("sg_{subgroup_id:06}.bin"),
            FileKind::Gradient => format!("sg_{subgroup_id:06}.grad.bin"),
            FileKind::Probe => "probe.bin".to_string(),
        };
        self.spec.root.join(name)
    }

    pub fn contains(&self, subgroup_id: u32, kind: FileKind) -> bool {
        match &self.backend {
            Backend::Dir => self.path_for(subgroup_id, kind).exists(),
            Backend::Mem(store) => store.lock().unwrap().contains_key(&(subgroup_id, kind)),
        }
    }

    /// Free bytes under the tier root, if the platform can tell.
    pub fn available_bytes(&self) -> Option<u64> {
        match self.backend {
            Backend::Dir => statvfs_available(&self.spec.root),
            Backend::Mem(_) => None,
        }
    }

    pub fn remove(&self, subgroup_id: u32, kind: FileKind) -> Result<()> {
        match &self.backend {
            Backend::Dir => match fs::remove_file(self.path_for(subgroup_id, kind)) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => Err(Error::io(self.id(), e)),
                _ => Ok(()),
            },
            Backend::Mem(store) => {
                store.lock().unwrap().remove(&(subgroup_id, kind));
                Ok(())
            }
        }
    }

    /// Writes a complete file image and returns the transfer statistics.
    pub fn write_blob(&self, subgroup_id: u32, kind: FileKind, image: &[u8]) -> Result<IoStats> {
        let start = Instant::now();
        match &self.backend {
            Backend::Mem(store) => {
                let mut stored = vec![0u8; image.len()];
                self.move_bytes(image.len(), Direction::Write, |r| {
                    stored[r.clone()].copy_from_slice(&image[r])
                });
                store
                    .lock()
                    .unwrap()
                    .insert((subgroup_id, kind), Arc::new(stored));
            }
            Backend::Dir => {
                let path = self.path_for(subgroup_id, kind);
                let file = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(&path)
                    .map_err(|e| Error::io(self.id(), e))?;
                self.parallel_ranges(image.len(), |range| {
                    self.file_chunks(range, Direction::Write, |r| {
                        file.write_all_at(&image[r.clone()], r.start as u64)
                    })
                })?;
                file.sync_data().map_err(|e| Error::io(self.id(), e))?;
            }
        }
        Ok(IoStats {
            bytes: image.len() as u64,
            duration: start.elapsed(),
        })
    }

    /// Reads a complete file image.
    pub fn read_blob(&self, subgroup_id: u32, kind: FileKind) -> Result<(Vec<u8>, IoStats)> {
        let missing = || Error::PlacementInconsistency {
            tier_id: self.id(),
            subgroup_id,
        };
        let start = Instant::now();
        let image = match &self.backend {
            Backend::Mem(store) => {
                let stored = store
                    .lock()
                    .unwrap()
                    .get(&(subgroup_id, kind))
                    .cloned()
                    .ok_or_else(missing)?;
                let mut image = vec![0u8; stored.len()];
                self.move_bytes(stored.len(), Direction::Read, |r| {
                    image[r.clone()].copy_from_slice(&stored[r])
                });
                image
            }
            Backend::Dir => {
                let path = self.path_for(subgroup_id, kind);
                let file = File::open(&path).map_err(|e| match e.kind() {
                    io::ErrorKind::NotFound => missing(),
                    _ => Error::io(self.id(), e),
                })?;
                let len = file.metadata().map_err(|e| Error::io(self.id(), e))?.len() as usize;
                let image = Mutex::new(vec![0u8; len]);
                self.parallel_ranges(len, |range| {
                    let mut local = vec![0u8; range.len()];
                    let base = range.start;
                    self.file_chunks(range.clone(), Direction::Read, |r| {
                        file.read_exact_at(&mut local[r.start - base..r.end - base], r.start as u64)
                    })?;
                    image.lock().unwrap()[range].copy_from_slice(&local);
                    Ok(())
                })?;
                image.into_inner().unwrap()
            }
        };
        let stats = IoStats {
            bytes: image.len() as u64,
            duration: start.elapsed(),
        };
        Ok((image, stats))
    }

    fn move_bytes(&self, len: usize, dir: Direction, copy: impl FnMut(std::ops::Range<usize>)) {
        match &self.throttle {
            Some(t) => t.transfer(len, dir, copy),
            None => {
                let mut copy = copy;
                copy(0..len)
            }
        }
    }

    /// Runs `f` over `io_parallelism` contiguous ranges of `0..len`.
    fn parallel_ranges(
        &self,
        len: usize,
        f: impl Fn(std::ops::Range<usize>) -> Result<()> + Sync,
    ) -> Result<()> {
        let streams = self.spec.io_parallelism.max(1).min(len.div_ceil(FILE_CHUNK)).max(1);
        if streams == 1 {
            return f(0..len);
        }
        let per = len.div_ceil(streams);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..streams)
                .map(|k| {
                    let f = &f;
                    s.spawn(move || f(k * per..((k + 1) * per).min(len)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("tier i/o stream panicked"))
                .collect::<Result<Vec<()>>>()
                .map(|_| ())
        })
    }

    fn file_chunks(
        &self,
        range: std::ops::Range<usize>,
        dir: Direction,
        mut op: impl FnMut(std::ops::Range<usize>) -> io::Result<()>,
    ) -> Result<()> {
        let chunk = self
            .throttle
            .as_ref()
            .map_or(FILE_CHUNK, |t| t.chunk_len(dir).min(FILE_CHUNK));
        let _stream = self.throttle.as_ref().map(Throttle::stream);
        let mut off = range.start;
        while off < range.end {
            let end = (off + chunk).min(range.end);
            op(off..end).map_err(|e| Error::io(self.id(), e))?;
            if let Some(t) = &self.throttle {
                t.consume(end - off, dir);
            }
            off = end;
        }
        Ok(())
    }

    /// Measures read and write bandwidth and stores the result in the spec.
    pub fn probe(&mut self, probe_bytes: usize, repetitions: usize) -> Result<ProbeResult> {
        let r = probe_bandwidth(self, probe_bytes, repetitions)?;
        self.spec.read_bw = r.read_bw;
        self.spec.write_bw = r.write_bw;
        Ok(r)
    }
}

#[cfg(target_os = "linux")]
fn statvfs_available(path: &Path) -> Option<u64> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;
    let c = CString::new(path.as_os_str().as_bytes()).ok()?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `st` a valid out pointer.
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut st) };
    (rc == 0).then(|| st.f_bavail as u64 * st.f_frsize as u64)
}

#[cfg(not(target_os = "linux"))]
fn statvfs_available(_path: &Path) -> Option<u64> {
    None
}

/// Drops cached pages of `file` so the next read goes to the device.
fn drop_page_cache(file: &File) {
    #[cfg(target_os = "linux")]
    {
        use std::os::unix::io::AsRawFd;
        // SAFETY: plain advisory syscall on an open descriptor.
        unsafe {
            libc::posix_fadvise(file.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED);
        }
    }
    #[cfg(not(target_os = "linux"))]
    let _ = file;
}

/// Serializes `sg` to `tier`. The caller holds the tier lock when locking
/// is enabled.
pub fn write_subgroup(tier: &Tier, sg: &Subgroup) -> Result<IoStats> {
    let image = format::encode(sg.id, &[&sg.params, &sg.momentum, &sg.variance]);
    tier.write_blob(sg.id, FileKind::State, &image)
}

/// Reads subgroup `subgroup_id` from `tier` into `dest`, reusing its buffers.
pub fn read_subgroup_into(tier: &Tier, subgroup_id: u32, dest: &mut Subgroup) -> Result<IoStats> {
    let (image, stats) = tier.read_blob(subgroup_id, FileKind::State)?;
    format::decode(
        &image,
        subgroup_id,
        &mut [&mut dest.params, &mut dest.momentum, &mut dest.variance],
    )
    .map_err(|reason| Error::Format {
        tier_id: tier.id(),
        reason,
    })?;
    dest.id = subgroup_id;
    Ok(stats)
}

pub fn read_subgroup(tier: &Tier, subgroup_id: u32) -> Result<(Subgroup, IoStats)> {
    let mut sg = Subgroup::zeros(subgroup_id, 0);
    let stats = read_subgroup_into(tier, subgroup_id, &mut sg)?;
    Ok((sg, stats))
}

pub fn write_gradient(tier: &Tier, subgroup_id: u32, grads: &[f32]) -> Result<IoStats> {
    let image = format::encode(subgroup_id, &[grads]);
    tier.write_blob(subgroup_id, FileKind::Gradient, &image)
}

pub fn read_gradient_into(tier: &Tier, subgroup_id: u32, dest: &mut Vec<f32>) -> Result<IoStats> {
    let (image, stats) = tier.read_blob(subgroup_id, FileKind::Gradient)?;
    format::decode(&image, subgroup_id, &mut [dest]).map_err(|reason| Error::Format {
        tier_id: tier.id(),
        reason,
    })?;
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub read_bw: f64,
    pub write_bw: f64,
    /// Some repetition finished below timer resolution.
    pub low_confidence: bool,
}

/// Writes and reads back a `probe_bytes` blob `repetitions` times and
/// returns the mean throughput, ignoring the first (warm-up) repetition.
pub fn probe_bandwidth(tier: &Tier, probe_bytes: usize, repetitions: usize) -> Result<ProbeResult> {
    let fail = |reason: String| Error::ProbeFailed {
        tier_id: tier.id(),
        reason,
    };
    if probe_bytes < 1 << 20 {
        return Err(fail(format!("probe size {probe_bytes} is below 1 MiB")));
    }
    if repetitions < 2 {
        return Err(fail("need at least one repetition after warm-up".into()));
    }
    let blob: Vec<u8> = (0..probe_bytes).map(|i| (i * 31 % 251) as u8).collect();
    let mut low_confidence = false;
    let mut clamp = |d: Duration| {
        if d < TIMER_RESOLUTION {
            low_confidence = true;
            TIMER_RESOLUTION
        } else {
            d
        }
    };
    let (mut read_sum, mut write_sum) = (0.0, 0.0);
    for rep in 0..repetitions {
        let w = tier
            .write_blob(0, FileKind::Probe, &blob)
            .map_err(|e| fail(e.to_string()))?;
        if let Backend::Dir = tier.backend {
            if let Ok(f) = File::open(tier.path_for(0, FileKind::Probe)) {
                drop_page_cache(&f);
            }
        }
        let (back, r) = tier
            .read_blob(0, FileKind::Probe)
            .map_err(|e| fail(e.to_string()))?;
        if back.len() != blob.len() {
            return Err(fail("probe read back a short blob".into()));
        }
        let (wd, rd) = (clamp(w.duration), clamp(r.duration));
        if rep > 0 {
            write_sum += probe_bytes as f64 / wd.as_secs_f64();
            read_sum += probe_bytes as f64 / rd.as_secs_f64();
        }
    }
    tier.remove(0, FileKind::Probe)?;
    let n = (repetitions - 1) as f64;
    Ok(ProbeResult {
        read_bw: read_sum / n,
        write_bw: write_sum / n,
        low_confidence,
    })
}
