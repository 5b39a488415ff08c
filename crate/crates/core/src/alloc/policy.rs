use std::time::Duration;

use super::metrics::AllocationMetrics;
use crate::config::{ConfigError, KeyValues, GB, KB, MB};

/// Per size-class reservation thresholds, recomputed every management
/// round from the previous interval's demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Thresholds {
    /// Reserve more when free reserved memory drops below this.
    pub rsv_thr: u64,
    /// Amount a reserving round aims for.
    pub tgt_mem: u64,
    /// Release memory above this.
    pub trim_thr: u64,
    /// Bytes per growth or mapping call during reservation.
    pub mem_chunk: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservationPolicy {
    pub rsv_factor: f64,
    /// Management round period; also the metrics interval.
    pub interval: Duration,
    pub min_rsv: u64,
    pub mmap_threshold: u64,
    pub table_size: usize,
    /// `rsv_thr = tgt_mem * rsv_ratio`
    pub rsv_ratio: f64,
    /// `trim_thr = tgt_mem * trim_ratio`
    pub trim_ratio: f64,
    /// Keep freed large chunks in the pool (up to `trim_thr`) instead of
    /// unmapping them right away.
    pub recycle_large: bool,
    /// Address space reserved for the heap region.
    pub heap_limit: u64,
    pub page_size: u64,
    pub heap: Thresholds,
    pub mmap: Thresholds,
}

impl Default for ReservationPolicy {
    fn default() -> Self {
        let mut p = ReservationPolicy {
            rsv_factor: 2.0,
            interval: Duration::from_millis(2),
            min_rsv: 5 * MB,
            mmap_threshold: 128 * KB,
            table_size: 8,
            rsv_ratio: 0.5,
            trim_ratio: 2.0,
            recycle_large: true,
            heap_limit: 4 * GB,
            page_size: 4096,
            heap: Thresholds {
                rsv_thr: 0,
                tgt_mem: 0,
                trim_thr: 0,
                mem_chunk: 0,
            },
            mmap: Thresholds {
                rsv_thr: 0,
                tgt_mem: 0,
                trim_thr: 0,
                mem_chunk: 0,
            },
        };
        p.reset_thresholds();
        p
    }
}

const POLICY_KEYS: &[&str] = &[
    "rsv_factor",
    "interval_ms",
    "min_rsv",
    "mmap_threshold",
    "table_size",
    "rsv_ratio",
    "trim_ratio",
    "recycle_large",
    "heap_limit",
    "page_size",
    "heap.rsv_thr",
    "heap.tgt_mem",
    "heap.trim_thr",
    "heap.mem_chunk",
    "mmap.rsv_thr",
    "mmap.tgt_mem",
    "mmap.trim_thr",
    "mmap.mem_chunk",
];

impl ReservationPolicy {
    /// Thresholds for a process that has made no requests yet: reserve the
    /// `min_rsv` floor, one page (heap) or one threshold-sized chunk (pool)
    /// at a time.
    pub fn reset_thresholds(&mut self) {
        let tgt = self.min_rsv.max(self.page_size);
        self.heap = self.band(tgt, self.page_size);
        self.mmap = self.band(tgt, self.round_page(self.mmap_threshold));
    }

    fn band(&self, tgt_mem: u64, mem_chunk: u64) -> Thresholds {
        Thresholds {
            rsv_thr: (tgt_mem as f64 * self.rsv_ratio) as u64,
            tgt_mem,
            trim_thr: (tgt_mem as f64 * self.trim_ratio) as u64,
            mem_chunk,
        }
    }

    pub fn round_page(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.page_size).max(1) * self.page_size
    }

    pub fn is_large(&self, size: u64) -> bool {
        size >= self.mmap_threshold
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invariant(m));
        if !(self.rsv_factor > 0.0) {
            return bad("rsv_factor must be positive".into());
        }
        if !(self.rsv_ratio > 0.0 && self.rsv_ratio <= 1.0) || self.trim_ratio < 1.0 {
            return bad("need 0 < rsv_ratio <= 1 <= trim_ratio".into());
        }
        if self.table_size == 0 || self.mmap_threshold == 0 || self.interval.is_zero() {
            return bad("table_size, mmap_threshold and interval must be non-zero".into());
        }
        if !self.page_size.is_power_of_two() || self.mmap_threshold % self.page_size != 0 {
            return bad("mmap_threshold must be a multiple of a power-of-two page size".into());
        }
        for (name, t) in [("heap", &self.heap), ("mmap", &self.mmap)] {
            if !(t.rsv_thr <= t.tgt_mem && t.tgt_mem <= t.trim_thr) {
                return bad(format!("{name}: need rsv_thr <= tgt_mem <= trim_thr"));
            }
            if t.tgt_mem < self.min_rsv {
                return bad(format!("{name}: tgt_mem below min_rsv"));
            }
            if t.mem_chunk == 0 || t.mem_chunk % self.page_size != 0 {
                return bad(format!("{name}: mem_chunk must be a non-zero page multiple"));
            }
        }
        if self.mmap.mem_chunk < self.mmap_threshold {
            return bad("mmap: mem_chunk below mmap_threshold".into());
        }
        Ok(())
    }

    /// Parses `key = value` overrides on top of the defaults. Threshold
    /// keys (`heap.tgt_mem`, `mmap.mem_chunk`, ...) set the starting
    /// thresholds; rounds recompute them from demand.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let kv = KeyValues::parse(text)?;
        kv.check_keys(POLICY_KEYS)?;
        let mut p = ReservationPolicy::default();
        if let Some(v) = kv.parsed("rsv_factor")? {
            p.rsv_factor = v;
        }
        if let Some(v) = kv.parsed::<f64>("interval_ms")? {
            p.interval = Duration::from_secs_f64(v / 1000.0);
        }
        if let Some(v) = kv.bytes("min_rsv")? {
            p.min_rsv = v;
        }
        if let Some(v) = kv.bytes("mmap_threshold")? {
            p.mmap_threshold = v;
        }
        if let Some(v) = kv.parsed("table_size")? {
            p.table_size = v;
        }
        if let Some(v) = kv.parsed("rsv_ratio")? {
            p.rsv_ratio = v;
        }
        if let Some(v) = kv.parsed("trim_ratio")? {
            p.trim_ratio = v;
        }
        if let Some(v) = kv.parsed("recycle_large")? {
            p.recycle_large = v;
        }
        if let Some(v) = kv.bytes("heap_limit")? {
            p.heap_limit = v;
        }
        if let Some(v) = kv.bytes("page_size")? {
            p.page_size = v;
        }
        p.reset_thresholds();
        for (prefix, t) in [("heap", &mut p.heap), ("mmap", &mut p.mmap)] {
            if let Some(v) = kv.bytes(&format!("{prefix}.rsv_thr"))? {
                t.rsv_thr = v;
            }
            if let Some(v) = kv.bytes(&format!("{prefix}.tgt_mem"))? {
                t.tgt_mem = v;
            }
            if let Some(v) = kv.bytes(&format!("{prefix}.trim_thr"))? {
                t.trim_thr = v;
            }
            if let Some(v) = kv.bytes(&format!("{prefix}.mem_chunk"))? {
                t.mem_chunk = v;
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// Recomputes both threshold sets from the last interval's demand:
/// `tgt_mem = max(rsv_factor * bytes, min_rsv)`, the reserve/trim band
/// around it, and `mem_chunk` = mean request size rounded up to a page.
pub fn update_thresholds(metrics: &AllocationMetrics, policy: &ReservationPolicy) -> ReservationPolicy {
    let mut next = policy.clone();
    let class = |bytes: u64, mean: u64, floor_chunk: u64| {
        let demand = (policy.rsv_factor * bytes as f64).ceil() as u64;
        let tgt = demand.max(policy.min_rsv).max(policy.page_size);
        let chunk = if mean == 0 {
            floor_chunk
        } else {
            policy.round_page(mean)
        };
        policy.band(tgt, chunk)
    };
    next.heap = class(metrics.small.bytes, metrics.small.mean, policy.heap.mem_chunk);
    next.mmap = class(metrics.large.bytes, metrics.large.mean, policy.mmap.mem_chunk);
    next
}
