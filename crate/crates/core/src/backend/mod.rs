//! Raw memory primitives behind a uniform interface.
//!
//! Two implementations exist: [`OsBackend`] talks to the kernel (mmap,
//! mremap, mlock, posix_fadvise, /proc) and [`SimBackend`] models on-demand
//! page faults and watermark-driven reclaim in deterministic simulated time.
//! Both hand out real, writable host memory so allocator correctness can be
//! checked byte for byte on either one.

mod host;
mod os;
mod sim;

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

pub use os::OsBackend;
pub use sim::{PressureId, SimBackend, SimConfig};

/// Page size used by the simulated backend.
pub const SIM_PAGE_SIZE: usize = 4096;

pub type AddrRange = Range<usize>;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("region growth of {requested} bytes exceeds the remaining {remaining} bytes")]
    GrowthFailed { requested: usize, remaining: usize },
    #[error("mapping of {size} bytes failed")]
    MapFailed { size: usize },
    #[error("out of memory: nothing left to reclaim")]
    OutOfMemory,
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("memory statistics unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BackendError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        BackendError::ContractViolation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, BackendError>;

/// One contiguous, growable region with a single end marker. This is the
/// program-break analogue: `[base, committed_end)` is usable, everything up
/// to `limit` may be committed later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub base: usize,
    pub committed_end: usize,
    pub limit: usize,
}

impl Region {
    pub fn committed(&self) -> usize {
        self.committed_end - self.base
    }

    pub fn remaining(&self) -> usize {
        self.limit - self.committed_end
    }
}

/// An anonymous mapping handed out by [`Backend::map_chunk`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChunkHandle {
    pub base: usize,
    pub length: usize,
    pub pinned: bool,
}

impl ChunkHandle {
    pub fn range(&self) -> AddrRange {
        self.base..self.base + self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BackendStats {
    pub total: u64,
    pub available: u64,
    pub file_cache: u64,
    pub watermark_low: u64,
    pub watermark_min: u64,
    /// Bytes currently pinned through this backend.
    pub pinned: u64,
}

impl BackendStats {
    /// Fraction of memory in use, `(total - available) / total`.
    pub fn usage(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        (self.total - self.available.min(self.total)) as f64 / self.total as f64
    }
}

/// How a prefault was carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefaultMode {
    /// Pages pinned with `mlock`.
    Locked,
    /// Pin limit hit; pages were touched one by one instead.
    Touched,
    /// Simulated backend.
    Modeled,
}

/// Result of a file-cache release request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Advice {
    Released { bytes: u64 },
    NotCached,
    /// The backend does not know the file; nothing was done.
    UnknownFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendOp {
    Grow,
    Shrink,
    Map,
    Resize,
    Unmap,
    Prefault,
    Unpin,
    Touch,
    Advise,
    Pressure,
    LoadFile,
}

impl fmt::Display for BackendOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BackendOp::Grow => "grow",
            BackendOp::Shrink => "shrink",
            BackendOp::Map => "map",
            BackendOp::Resize => "resize",
            BackendOp::Unmap => "unmap",
            BackendOp::Prefault => "prefault",
            BackendOp::Unpin => "unpin",
            BackendOp::Touch => "touch",
            BackendOp::Advise => "advise",
            BackendOp::Pressure => "pressure",
            BackendOp::LoadFile => "load_file",
        };
        f.write_str(s)
    }
}

/// One entry of a backend call log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendEvent {
    pub seq: u64,
    pub op: BackendOp,
    pub bytes: u64,
    pub elapsed: Duration,
    pub available_after: u64,
    pub thread: Option<String>,
}

pub const EVENT_CSV_HEADER: &str = "seq,op,bytes,elapsed_us,available_after";

impl BackendEvent {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.3},{}",
            self.seq,
            self.op,
            self.bytes,
            self.elapsed.as_nanos() as f64 / 1000.0,
            self.available_after
        )
    }
}

pub fn events_to_csv(events: &[BackendEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 40 + 48);
    out.push_str(EVENT_CSV_HEADER);
    out.push('\n');
    for e in events {
        out.push_str(&e.csv_line());
        out.push('\n');
    }
    out
}

/// Memory primitives used by the allocator, the monitor daemon and the
/// benchmark. All methods take `&self`; implementations serialize their
/// own bookkeeping.
pub trait Backend: Send + Sync {
    fn page_size(&self) -> usize;

    /// Reserves address space for one region of at most `max_bytes`.
    fn reserve_region(&self, max_bytes: usize) -> Result<Region>;

    /// Commits `delta` more bytes at the end of the region and returns the
    /// new range. Pages are not faulted in.
    fn grow_region(&self, region: &mut Region, delta: usize) -> Result<AddrRange>;

    /// Releases the last `delta` committed bytes of the region.
    fn shrink_region(&self, region: &mut Region, delta: usize) -> Result<()>;

    /// Releases the whole region, committed or not.
    fn release_region(&self, region: Region) -> Result<()>;

    fn map_chunk(&self, size: usize) -> Result<ChunkHandle>;

    /// Grows or shrinks a chunk, preserving the common prefix. Growth may
    /// move the chunk; shrinking never does.
    fn resize_chunk(&self, handle: ChunkHandle, new_size: usize) -> Result<ChunkHandle>;

    fn unmap_chunk(&self, handle: ChunkHandle) -> Result<()>;

    /// Makes every page of `range` resident and pinned.
    fn prefault(&self, range: AddrRange) -> Result<Duration>;

    /// Unpins a previously pinned range. Pages stay resident.
    fn unpin(&self, range: AddrRange) -> Result<()>;

    /// First application write to `range`; returns the time spent faulting.
    fn touch(&self, range: AddrRange) -> Result<Duration>;

    fn memory_stats(&self) -> Result<BackendStats>;

    fn advise_release_file_cache(&self, file: &Path, length: u64) -> Result<Advice>;

    /// Number of memory-manipulating calls made so far (stats and advice
    /// excluded).
    fn call_count(&self) -> u64;

    /// Monotonic time: wall clock for a real backend, modeled time for a
    /// simulated one.
    fn now(&self) -> Duration;

    fn last_prefault_mode(&self) -> Option<PrefaultMode>;
}

pub(crate) fn check_aligned(what: &str, value: usize, page: usize) -> Result<()> {
    if value % page != 0 {
        return Err(BackendError::contract(format!(
            "{what} {value} is not a multiple of the page size {page}"
        )));
    }
    Ok(())
}
