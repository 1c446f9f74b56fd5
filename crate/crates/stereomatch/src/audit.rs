//! Global counters used by the benchmark and memory audits.
//!
//! `flops` counts multiply-accumulate operations issued by the matmul and
//! convolution kernels. `mem` tracks bytes held by live tensor buffers
//! (values and gradients) together with the high-water mark. Both are
//! process-global and cheap enough to leave always-on.

pub mod flops {
    use std::sync::atomic::{AtomicU64, Ordering};

    static MACS: AtomicU64 = AtomicU64::new(0);

    /// Record `n` multiply-accumulates.
    pub fn add(n: u64) {
        MACS.fetch_add(n, Ordering::Relaxed);
    }

    /// Total MACs recorded since process start.
    pub fn total() -> u64 {
        MACS.load(Ordering::Relaxed)
    }

    /// Measure the MACs issued while running `f`.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let before = total();
        let r = f();
        (r, total() - before)
    }
}

pub mod mem {
    use std::sync::atomic::{AtomicU64, Ordering};

    static LIVE: AtomicU64 = AtomicU64::new(0);
    static PEAK: AtomicU64 = AtomicU64::new(0);

    pub(crate) fn alloc(bytes: u64) {
        let now = LIVE.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }

    pub(crate) fn free(bytes: u64) {
        LIVE.fetch_sub(bytes, Ordering::Relaxed);
    }

    /// Bytes currently held by tensor value/gradient buffers.
    pub fn live_bytes() -> u64 {
        LIVE.load(Ordering::Relaxed)
    }

    /// High-water mark since process start or the last [`reset_peak`].
    pub fn peak_bytes() -> u64 {
        PEAK.load(Ordering::Relaxed)
    }

    /// Reset the high-water mark to the current live figure.
    pub fn reset_peak() {
        PEAK.store(LIVE.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    /// Run `f` and report its tensor-memory high-water mark relative to entry.
    pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let base = live_bytes();
        reset_peak();
        let r = f();
        (r, peak_bytes().saturating_sub(base))
    }
}
