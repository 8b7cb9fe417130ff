//! Tensor backing storage with a per-thread byte accountant.
//!
//! Every tensor buffer created on a thread adds its size to that thread's
//! live-byte counter and is subtracted again when dropped. The high-water mark
//! of the counter is the peak-memory figure reported by the benchmark. A buffer
//! dropped on a different thread than the one that created it is charged to
//! the dropping thread, so measurements are only meaningful for work that
//! stays on one thread.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

fn charge(bytes: i64) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

/// Bytes currently held by tensor buffers on this thread.
pub fn live_bytes() -> u64 {
    LIVE.with(|l| l.get().max(0) as u64)
}

/// Highest value of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> u64 {
    PEAK.with(|p| p.get().max(0) as u64)
}

/// Restart high-water tracking from the current live total.
pub fn reset_peak() {
    let now = LIVE.with(|l| l.get());
    PEAK.with(|p| p.set(now));
}

#[derive(Debug)]
pub(crate) struct Buffer {
    data: Vec<f64>,
}

impl Buffer {
    pub(crate) fn new(data: Vec<f64>) -> Self {
        charge(Self::bytes_of(&data));
        Buffer { data }
    }

    fn bytes_of(data: &[f64]) -> i64 {
        std::mem::size_of_val(data) as i64
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.data.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        charge(-Self::bytes_of(&self.data));
    }
}

impl Deref for Buffer {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}
