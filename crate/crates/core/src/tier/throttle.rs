//! Token-bucket model of a storage device.
//!
//! Tokens are nanoseconds of device time. A transfer of `b` bytes in one
//! direction costs `b / rate` of device time, so reads and writes share one
//! device the way they share one SSD. The bucket holds at most 1 ms worth of
//! tokens and transfers are charged in chunks of about 1 ms, so concurrent
//! streams interleave at millisecond granularity.
//!
//! The bucket may go into debt: a caller reserves its chunk, releases the
//! lock and sleeps until the device would have finished it. Oversleeping
//! does not accumulate because the schedule is kept in virtual time.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crate::placement::Direction;

const GRANULARITY: Duration = Duration::from_millis(1);
const MIN_CHUNK: usize = 4096;

#[derive(Debug)]
pub struct Throttle {
    read_bps: AtomicU64,
    write_bps: AtomicU64,
    /// Extra cost per additional concurrent stream, as a fraction.
    contention_penalty: f64,
    active: AtomicUsize,
    next_free: Mutex<Instant>,
}

/// Registers a concurrent stream for as long as it is alive.
pub struct Stream<'a> {
    throttle: &'a Throttle,
}

impl Drop for Stream<'_> {
    fn drop(&mut self) {
        self.throttle.active.fetch_sub(1, Ordering::AcqRel);
    }
}

impl Throttle {
    pub fn new(read_bps: f64, write_bps: f64, contention_penalty: f64) -> Self {
        assert!(read_bps > 0.0 && write_bps > 0.0, "throttle rates must be positive");
        Self {
            read_bps: AtomicU64::new(read_bps.to_bits()),
            write_bps: AtomicU64::new(write_bps.to_bits()),
            contention_penalty: contention_penalty.max(0.0),
            active: AtomicUsize::new(0),
            next_free: Mutex::new(Instant::now()),
        }
    }

    pub fn rate(&self, dir: Direction) -> f64 {
        let bits = match dir {
            Direction::Read => self.read_bps.load(Ordering::Relaxed),
            Direction::Write => self.write_bps.load(Ordering::Relaxed),
        };
        f64::from_bits(bits)
    }

    /// Changes the device speed; in-flight reservations keep their cost.
    pub fn set_rates(&self, read_bps: f64, write_bps: f64) {
        assert!(read_bps > 0.0 && write_bps > 0.0, "throttle rates must be positive");
        self.read_bps.store(read_bps.to_bits(), Ordering::Relaxed);
        self.write_bps.store(write_bps.to_bits(), Ordering::Relaxed);
    }

    /// Bytes moved per charge in direction `dir`.
    pub fn chunk_len(&self, dir: Direction) -> usize {
        ((self.rate(dir) * GRANULARITY.as_secs_f64()) as usize).max(MIN_CHUNK)
    }

    pub fn stream(&self) -> Stream<'_> {
        self.active.fetch_add(1, Ordering::AcqRel);
        Stream { throttle: self }
    }

    /// Blocks until the device has had time to move `bytes`.
    pub fn consume(&self, bytes: usize, dir: Direction) {
        let streams = self.active.load(Ordering::Acquire).max(1);
        let factor = 1.0 + self.contention_penalty * (streams - 1) as f64;
        let cost = Duration::from_secs_f64(bytes as f64 / self.rate(dir) * factor);
        let deadline = {
            let mut next_free = self.next_free.lock().unwrap();
            let now = Instant::now();
            let floor = now.checked_sub(GRANULARITY).unwrap_or(now);
            let start = (*next_free).max(floor);
            *next_free = start + cost;
            *next_free
        };
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
        }
    }

    /// Moves `len` bytes through the device in chunks, calling `copy` with
    /// each byte range before charging for it.
    pub fn transfer(&self, len: usize, dir: Direction, mut copy: impl FnMut(std::ops::Range<usize>)) {
        let _stream = self.stream();
        let chunk = self.chunk_len(dir);
        let mut off = 0;
        while off < len {
            let end = (off + chunk).min(len);
            copy(off..end);
            self.consume(end - off, dir);
            off = end;
        }
    }
}
