//! Node-level tier locks.
//!
//! At most one worker on a node may transfer to or from a given tier at a
//! time. Each acquisition opens `<lock_dir>/tier_<id>.lock` and takes an
//! exclusive advisory lock on it, which excludes other processes and, since
//! every acquisition uses its own open file description, other threads of
//! the same process as well.
//!
//! An execution context never holds two tier locks at once.

use std::cell::Cell;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::trace::{EventKind, EventTrace};

pub const LOCK_DIR_ENV: &str = "TIERFLOW_LOCK_DIR";

thread_local! {
    static HELD: Cell<Option<u16>> = const { Cell::new(None) };
}

#[derive(Clone, Debug)]
pub struct TierLocks {
    dir: PathBuf,
    trace: Arc<EventTrace>,
}

impl TierLocks {
    pub fn new(dir: impl Into<PathBuf>, trace: Arc<EventTrace>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| Error::LockDir {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir, trace })
    }

    /// `$TIERFLOW_LOCK_DIR` if set, else `fallback`, else a directory under
    /// the system temp dir.
    pub fn resolve_dir(fallback: Option<&Path>) -> PathBuf {
        std::env::var_os(LOCK_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| fallback.map(Path::to_path_buf))
            .unwrap_or_else(|| std::env::temp_dir().join("tierflow-locks"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, tier_id: u16) -> PathBuf {
        self.dir.join(format!("tier_{tier_id}.lock"))
    }

    /// Blocks until tier `tier_id` is free, then holds it until the guard
    /// is dropped. Hold intervals are recorded in the trace.
    pub fn acquire(&self, tier_id: u16, worker_id: u32, iteration: u32) -> Result<TierLockGuard> {
        if let Some(held) = HELD.with(Cell::get) {
            return Err(Error::LockNesting {
                held,
                requested: tier_id,
            });
        }
        let path = self.path_for(tier_id);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&path)
            .map_err(|source| Error::LockDir {
                path: path.clone(),
                source,
            })?;
        file.lock().map_err(|source| Error::LockDir { path, source })?;
        HELD.with(|h| h.set(Some(tier_id)));
        self.trace
            .record(worker_id, EventKind::LockAcquire, iteration, None, Some(tier_id), 0);
        Ok(TierLockGuard {
            file,
            tier_id,
            worker_id,
            iteration,
            trace: Arc::clone(&self.trace),
            _not_send: std::marker::PhantomData,
        })
    }
}

/// Held tier lock; releases on drop. Not transferable between threads.
pub struct TierLockGuard {
    file: File,
    tier_id: u16,
    worker_id: u32,
    iteration: u32,
    trace: Arc<EventTrace>,
    _not_send: std::marker::PhantomData<*const ()>,
}

impl TierLockGuard {
    pub fn tier_id(&self) -> u16 {
        self.tier_id
    }
}

impl Drop for TierLockGuard {
    fn drop(&mut self) {
        self.trace.record(
            self.worker_id,
            EventKind::LockRelease,
            self.iteration,
            None,
            Some(self.tier_id),
            0,
        );
        let _ = self.file.unlock();
        HELD.with(|h| h.set(None));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::lock_overlaps;
    use std::thread;
    use std::time::Duration;

    #[test]
    fn same_tier_is_mutually_exclusive_across_threads() {
        let _t = crate::testutil::timed();
        let dir = tempfile::tempdir().unwrap();
        let trace = Arc::new(EventTrace::new());
        let locks = TierLocks::new(dir.path(), Arc::clone(&trace)).unwrap();
        thread::scope(|s| {
            for w in 0..3 {
                let locks = &locks;
                s.spawn(move || {
                    for _ in 0..10 {
                        let _g = locks.acquire(0, w, 0).unwrap();
                        thread::sleep(Duration::from_micros(300));
                    }
                });
            }
        });
        let events = trace.snapshot();
        assert_eq!(events.len(), 60);
        assert!(lock_overlaps(&events).is_empty());
    }

    #[test]
    fn different_tiers_proceed_concurrently() {
        let dir = tempfile::tempdir().unwrap();
        let trace = Arc::new(EventTrace::new());
        let locks = TierLocks::new(dir.path(), Arc::clone(&trace)).unwrap();
        let a = locks.acquire(0, 0, 0).unwrap();
        let held_b = thread::scope(|s| {
            s.spawn(|| {
                let b = locks.acquire(1, 1, 0).unwrap();
                b.tier_id()
            })
            .join()
            .unwrap()
        });
        assert_eq!(held_b, 1);
        drop(a);
    }

    #[test]
    fn nesting_is_rejected_and_reacquire_works() {
        let dir = tempfile::tempdir().unwrap();
        let locks = TierLocks::new(dir.path(), Arc::new(EventTrace::new())).unwrap();
        let g = locks.acquire(0, 0, 0).unwrap();
        assert!(matches!(
            locks.acquire(1, 0, 0),
            Err(Error::LockNesting { held: 0, requested: 1 })
        ));
        drop(g);
        let g = locks.acquire(1, 0, 0).unwrap();
        drop(g);
        assert!(locks.acquire(0, 0, 0).is_ok());
        assert!(locks.path_for(3).ends_with("tier_3.lock"));
    }

    #[test]
    fn unusable_lock_dir_is_a_configuration_error() {
        let file = tempfile::NamedTempFile::new().unwrap();
        let err = TierLocks::new(file.path().join("sub"), Arc::new(EventTrace::new())).unwrap_err();
        assert!(matches!(err, Error::LockDir { .. }));
    }
}
