//! Byte accounting for matrix buffers.
//!
//! Every [`Tensor2D`](super::Tensor2D) reports its payload size here when it
//! is created and when it is dropped, so the live and peak byte counts of a
//! computation can be read back without looking at process RSS. Counters are
//! thread-local: a measurement only sees buffers owned by the calling thread.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn record_alloc(bytes: usize) {
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

pub(crate) fn record_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by live tensors on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark of [`live_bytes`] on this thread.
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Accounted bytes observed over one measured region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Usage {
    /// Live bytes when the region started.
    pub baseline: usize,
    /// Highest live byte count reached inside the region.
    pub peak: usize,
    /// Live bytes when the region ended.
    pub end: usize,
}

impl Usage {
    /// Peak growth above the baseline.
    pub fn peak_delta(&self) -> usize {
        self.peak.saturating_sub(self.baseline)
    }

    /// Bytes allocated inside the region that are still alive at its end
    /// (typically the returned result).
    pub fn retained(&self) -> usize {
        self.end.saturating_sub(self.baseline)
    }

    /// Working memory: peak growth not accounted for by what was retained.
    pub fn transient(&self) -> usize {
        self.peak_delta().saturating_sub(self.retained())
    }
}

/// An open measurement region. Regions nest: closing an inner region folds
/// its peak back into the enclosing one.
#[derive(Debug)]
pub struct Scope {
    baseline: usize,
    outer_peak: usize,
}

impl Scope {
    pub fn begin() -> Self {
        let baseline = live_bytes();
        let outer_peak = peak_bytes();
        PEAK.with(|peak| peak.set(baseline));
        Self {
            baseline,
            outer_peak,
        }
    }

    pub fn finish(self) -> Usage {
        let peak = peak_bytes();
        let end = live_bytes();
        PEAK.with(|p| p.set(peak.max(self.outer_peak)));
        Usage {
            baseline: self.baseline,
            peak,
            end,
        }
    }
}

/// Runs `f` inside a fresh [`Scope`]. The result is kept alive until the
/// scope closes, so it shows up in [`Usage::retained`].
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Usage) {
    let scope = Scope::begin();
    let out = f();
    let usage = scope.finish();
    (out, usage)
}
