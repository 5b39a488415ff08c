use std::sync::atomic::{AtomicU64, Ordering};

/// Demand seen in one size class during one interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassMetrics {
    pub bytes: u64,
    pub count: u64,
    /// `bytes / count`, or the previous interval's mean when idle.
    pub mean: u64,
}

impl ClassMetrics {
    pub fn new(bytes: u64, count: u64, prior_mean: u64) -> Self {
        let mean = if count > 0 { bytes / count } else { prior_mean };
        ClassMetrics { bytes, count, mean }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AllocationMetrics {
    pub small: ClassMetrics,
    pub large: ClassMetrics,
}

/// Lock-free accumulators for the current interval.
#[derive(Debug, Default)]
pub struct MetricsRecorder {
    small_bytes: AtomicU64,
    small_count: AtomicU64,
    large_bytes: AtomicU64,
    large_count: AtomicU64,
}

impl MetricsRecorder {
    pub fn record(&self, size: u64, large: bool) {
        let (bytes, count) = if large {
            (&self.large_bytes, &self.large_count)
        } else {
            (&self.small_bytes, &self.small_count)
        };
        bytes.fetch_add(size, Ordering::Relaxed);
        count.fetch_add(1, Ordering::Relaxed);
    }

    /// Current-interval counters without resetting them.
    pub fn peek(&self) -> (u64, u64, u64, u64) {
        (
            self.small_bytes.load(Ordering::Relaxed),
            self.small_count.load(Ordering::Relaxed),
            self.large_bytes.load(Ordering::Relaxed),
            self.large_count.load(Ordering::Relaxed),
        )
    }

    /// Closes the interval: snapshots and zeroes the accumulators.
    pub fn rollover(&self, prior: &AllocationMetrics) -> AllocationMetrics {
        let sb = self.small_bytes.swap(0, Ordering::Relaxed);
        let sc = self.small_count.swap(0, Ordering::Relaxed);
        let lb = self.large_bytes.swap(0, Ordering::Relaxed);
        let lc = self.large_count.swap(0, Ordering::Relaxed);
        AllocationMetrics {
            small: ClassMetrics::new(sb, sc, prior.small.mean),
            large: ClassMetrics::new(lb, lc, prior.large.mean),
        }
    }
}
