//! Kernel cost and memory accounting.
//!
//! The multiply-accumulate counter is thread-local so concurrent work on other
//! threads never pollutes a measurement. Allocation accounting is process-wide
//! and tracks bytes held by live tensor buffers.

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

pub(crate) fn add_macs(n: u64) {
    MACS.with(|m| m.set(m.get().wrapping_add(n)));
}

/// Multiply-accumulates issued by convolution-type kernels on this thread
/// since the last [`reset_macs`].
pub fn macs() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_macs() {
    MACS.with(|m| m.set(0));
}

/// Runs `f` and returns its result with the MACs it issued on this thread.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = macs();
    let out = f();
    (out, macs().wrapping_sub(before))
}

pub(crate) fn track_alloc(bytes: usize) {
    let live = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
}

pub(crate) fn track_free(bytes: usize) {
    LIVE_BYTES.fetch_sub(bytes, Ordering::Relaxed);
}

/// Bytes currently held by tensor buffers.
pub fn live_bytes() -> usize {
    LIVE_BYTES.load(Ordering::Relaxed)
}

/// High-water mark of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}

pub fn reset_peak() {
    PEAK_BYTES.store(live_bytes(), Ordering::Relaxed);
}
