//! Helpers shared by unit tests.

use std::sync::{Mutex, MutexGuard};

static TIMED: Mutex<()> = Mutex::new(());

/// Keeps wall-clock measurements from running alongside each other.
pub fn timed() -> MutexGuard<'static, ()> {
    TIMED.lock().unwrap_or_else(|e| e.into_inner())
}
