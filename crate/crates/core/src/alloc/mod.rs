//! Allocator front-end with background reservation.
//!
//! Requests below `mmap_threshold` are carved from a [`HeapArena`]; larger
//! ones come from a [`MmapPool`] of prefaulted chunks. While the process is
//! registered as latency-critical, a management round runs every
//! `interval`: it recomputes thresholds from the last interval's demand,
//! grows the heap top chunk in `mem_chunk` steps (releasing the arena lock
//! between steps), shrinks over-sized handed-out chunks, and keeps the pool
//! between its reserve and trim thresholds.

pub mod arena;
pub mod metrics;
pub mod policy;
pub mod pool;
pub mod round;

use std::collections::HashMap;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use arena::{HeapArena, SmallSource, ALIGN};
pub use metrics::{AllocationMetrics, ClassMetrics, MetricsRecorder};
pub use policy::{update_thresholds, ReservationPolicy, Thresholds};
pub use pool::{best_fit_index, bucket_index, MmapPool};
pub use round::{Action, Component, ManagementRound, RoundReport, StepReport, ROUND_CSV_HEADER};

use crate::backend::{Backend, BackendError, ChunkHandle};
use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("{size} bytes is below the {threshold}-byte large-chunk threshold")]
    Undersized { size: u64, threshold: u64 },
    #[error("address {0:#x} was not returned by this allocator or is already free")]
    UnknownAddress(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Answers whether a pid is registered as latency-critical.
pub trait RegistryProbe: Send + Sync {
    fn is_registered(&self, pid: u32) -> bool;
}

impl<F: Fn(u32) -> bool + Send + Sync> RegistryProbe for F {
    fn is_registered(&self, pid: u32) -> bool {
        self(pid)
    }
}

/// How an allocation was served.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocPath {
    SmallFreeList,
    SmallTopChunk,
    SmallGrown,
    /// Large request served from its best-fit bucket.
    LargeBestFit,
    /// Served from the largest free chunk, which already fit.
    LargeLargest,
    /// The largest free chunk was too small and was resized up.
    LargeResized,
    LargeMapped,
}

impl AllocPath {
    pub fn is_fast(self) -> bool {
        matches!(
            self,
            AllocPath::SmallFreeList
                | AllocPath::SmallTopChunk
                | AllocPath::LargeBestFit
                | AllocPath::LargeLargest
        )
    }

    pub fn is_large(self) -> bool {
        matches!(
            self,
            AllocPath::LargeBestFit
                | AllocPath::LargeLargest
                | AllocPath::LargeResized
                | AllocPath::LargeMapped
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct LargeLive {
    handle: ChunkHandle,
    requested: usize,
}

#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub managed: bool,
    pub rounds: u64,
    pub policy: ReservationPolicy,
    pub last_interval: AllocationMetrics,
    /// Counters for the interval in progress: small bytes/count, large
    /// bytes/count.
    pub current: (u64, u64, u64, u64),
    pub top_free: u64,
    pub heap_committed: u64,
    pub heap_pinned: u64,
    pub pool_total: u64,
    pub pool_occupancy: Vec<usize>,
    pub pending_shrink: usize,
    pub live_large: usize,
    pub fast_served: u64,
    pub fallback: u64,
    /// Most management steps any application thread saw completed while it
    /// was queued on the arena lock.
    pub max_steps_while_queued: u64,
}

pub(crate) struct Shared {
    pub(crate) backend: Arc<dyn Backend>,
    probe: Arc<dyn RegistryProbe>,
    pid: u32,
    threaded: bool,
    pub(crate) base_policy: ReservationPolicy,
    pub(crate) policy: RwLock<ReservationPolicy>,
    pub(crate) arena: Mutex<HeapArena>,
    /// Arena lock arrivals and acquisitions, so a management step can let
    /// every waiting thread through before taking the lock again.
    heap_arrivals: AtomicU64,
    heap_served: AtomicU64,
    pub(crate) heap_steps: AtomicU64,
    max_steps_queued: AtomicU64,
    pub(crate) pool: Mutex<MmapPool>,
    large_live: Mutex<HashMap<usize, LargeLive>>,
    /// Bases of handed-out chunks longer than their request.
    pub(crate) alloc_set: Mutex<Vec<usize>>,
    pub(crate) metrics: MetricsRecorder,
    pub(crate) last_metrics: Mutex<AllocationMetrics>,
    pub(crate) managed: AtomicBool,
    pub(crate) rounds: AtomicU64,
    last_probe: Mutex<Option<Duration>>,
    fast_served: AtomicU64,
    fallback: AtomicU64,
    shutdown: AtomicBool,
    worker: Mutex<Option<JoinHandle<()>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Shared {
    fn page(&self) -> usize {
        self.backend.page_size()
    }

    /// Arena lock for application threads.
    pub(crate) fn app_heap_lock(&self) -> MutexGuard<'_, HeapArena> {
        self.heap_arrivals.fetch_add(1, Ordering::SeqCst);
        let steps = self.heap_steps.load(Ordering::SeqCst);
        let g = lock(&self.arena);
        self.heap_served.fetch_add(1, Ordering::SeqCst);
        let waited = self.heap_steps.load(Ordering::SeqCst) - steps;
        self.max_steps_queued.fetch_max(waited, Ordering::Relaxed);
        g
    }

    /// Runs `f` under the arena lock, then waits until every thread that was
    /// queued on the lock has had its turn.
    pub(crate) fn heap_step<R>(&self, f: impl FnOnce(&mut HeapArena) -> R) -> R {
        let out = {
            let mut g = lock(&self.arena);
            let r = f(&mut g);
            self.heap_steps.fetch_add(1, Ordering::SeqCst);
            r
        };
        let waiting = self.heap_arrivals.load(Ordering::SeqCst);
        while self.heap_served.load(Ordering::SeqCst) < waiting {
            std::thread::yield_now();
        }
        // let runnable application threads reach the lock on a shared core
        std::thread::yield_now();
        out
    }

    fn record_fast(&self, path: AllocPath) {
        if path.is_fast() {
            self.fast_served.fetch_add(1, Ordering::Relaxed);
        } else {
            self.fallback.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn maybe_probe(self: &Arc<Self>) {
        if self.managed.load(Ordering::Acquire) || !self.threaded {
            return;
        }
        let now = self.backend.now();
        {
            let mut last = lock(&self.last_probe);
            if let Some(t) = *last {
                if now.saturating_sub(t) < self.base_policy.interval {
                    return;
                }
            }
            *last = Some(now);
        }
        if self.probe.is_registered(self.pid) {
            self.managed.store(true, Ordering::Release);
            Shared::spawn_worker(self);
        }
    }

    pub(crate) fn probe_registered(&self) -> bool {
        self.probe.is_registered(self.pid)
    }

    fn spawn_worker(self: &Arc<Self>) {
        let mut slot = lock(&self.worker);
        if let Some(h) = slot.as_ref() {
            if !h.is_finished() {
                return;
            }
        }
        if let Some(h) = slot.take() {
            let _ = h.join();
        }
        let inner = Arc::clone(self);
        let handle = std::thread::Builder::new()
            .name("alloc-mgmt".into())
            .spawn(move || inner.worker_loop())
            .expect("spawn management thread");
        *slot = Some(handle);
    }

    fn worker_loop(&self) {
        let interval = self.base_policy.interval;
        let mut next = Instant::now();
        loop {
            if self.shutdown.load(Ordering::Acquire) {
                return;
            }
            let number = self.rounds.load(Ordering::Relaxed) + 1;
            let mut round = ManagementRound::new(number);
            loop {
                match round.step(self, false) {
                    Ok(Some(_)) => {}
                    Ok(None) => break,
                    Err(e) => {
                        log::warn!("management round {number} failed: {e}");
                        break;
                    }
                }
            }
            if !self.managed.load(Ordering::Acquire) {
                return;
            }
            next += interval;
            let now = Instant::now();
            if next <= now {
                next = now;
                continue;
            }
            std::thread::park_timeout(next - now);
        }
    }

    fn allocate_small(&self, size: usize) -> Result<(usize, AllocPath), AllocError> {
        let mut arena = self.app_heap_lock();
        if let Some((addr, src)) = arena.try_allocate(size) {
            let path = match src {
                SmallSource::FreeList => AllocPath::SmallFreeList,
                _ => AllocPath::SmallTopChunk,
            };
            return Ok((addr, path));
        }
        let addr = arena.allocate_growing(self.backend.as_ref(), size)?;
        Ok((addr, AllocPath::SmallGrown))
    }

    fn allocate_large(&self, size: usize) -> Result<(usize, AllocPath), AllocError> {
        let page = self.page();
        let len = size.div_ceil(page) * page;
        let managed = self.managed.load(Ordering::Acquire);
        let mut taken = None;
        if managed {
            // A pool busy with a management insert is skipped, not waited on.
            if let Ok(mut pool) = self.pool.try_lock() {
                taken = match pool.take_best_fit(len as u64)? {
                    Some(c) => Some((c, AllocPath::LargeBestFit)),
                    None => pool.take_largest().map(|c| {
                        let path = if c.length >= len {
                            AllocPath::LargeLargest
                        } else {
                            AllocPath::LargeResized
                        };
                        (c, path)
                    }),
                };
            }
        }
        let (handle, path) = match taken {
            Some((mut c, path)) => {
                if c.pinned {
                    self.backend.unpin(c.range())?;
                    c.pinned = false;
                }
                if c.length < len {
                    match self.backend.resize_chunk(c, len) {
                        Ok(r) => (r, path),
                        Err(_) => {
                            self.backend.unmap_chunk(c)?;
                            (self.backend.map_chunk(len)?, AllocPath::LargeMapped)
                        }
                    }
                } else {
                    (c, path)
                }
            }
            None => (self.backend.map_chunk(len)?, AllocPath::LargeMapped),
        };
        lock(&self.large_live).insert(
            handle.base,
            LargeLive {
                handle,
                requested: size,
            },
        );
        if handle.length > len {
            lock(&self.alloc_set).push(handle.base);
        }
        Ok((handle.base, path))
    }

    fn deallocate(&self, addr: usize) -> Result<(), AllocError> {
        let large = lock(&self.large_live).remove(&addr);
        if let Some(live) = large {
            return self.free_large(live.handle);
        }
        let mut arena = self.app_heap_lock();
        if !arena.owns(addr) {
            return Err(AllocError::UnknownAddress(addr));
        }
        arena.deallocate(addr)?;
        if !self.managed.load(Ordering::Acquire) && !arena.has_handed_out() {
            // default trimming: keep at most one threshold's worth of top chunk
            let keep = self.base_policy.mmap_threshold;
            let top = arena.top_free();
            if top > 2 * keep {
                let page = self.page() as u64;
                let delta = (top - keep) / page * page;
                arena.shrink(self.backend.as_ref(), delta as usize)?;
            }
        }
        Ok(())
    }

    fn free_large(&self, mut handle: ChunkHandle) -> Result<(), AllocError> {
        let trim = read_policy(&self.policy).mmap.trim_thr;
        if self.managed.load(Ordering::Acquire) && self.base_policy.recycle_large {
            let mut pool = lock(&self.pool);
            if pool.total_size() + handle.length as u64 <= trim {
                if self.backend.prefault(handle.range()).is_ok() {
                    handle.pinned = true;
                    pool.insert(handle)?;
                    return Ok(());
                }
            }
        }
        self.backend.unmap_chunk(handle)?;
        Ok(())
    }

    /// One DelayRelease action: trims a handed-out chunk down to its
    /// page-rounded request. Returns the bytes released.
    pub(crate) fn shrink_handed_out(&self, base: usize) -> Result<u64, AllocError> {
        let page = self.page();
        let mut live = lock(&self.large_live);
        let Some(entry) = live.get_mut(&base) else {
            return Ok(0);
        };
        let want = entry.requested.div_ceil(page) * page;
        if entry.handle.length <= want {
            return Ok(0);
        }
        let released = entry.handle.length - want;
        entry.handle = self.backend.resize_chunk(entry.handle, want)?;
        Ok(released as u64)
    }
}

pub(crate) fn read_policy(p: &RwLock<ReservationPolicy>) -> std::sync::RwLockReadGuard<'_, ReservationPolicy> {
    p.read().unwrap_or_else(|e| e.into_inner())
}

pub(crate) fn write_policy(p: &RwLock<ReservationPolicy>) -> std::sync::RwLockWriteGuard<'_, ReservationPolicy> {
    p.write().unwrap_or_else(|e| e.into_inner())
}

pub(crate) fn lock_mutex<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    lock(m)
}

/// The allocator. Cheap to share behind an `Arc`; all methods take `&self`.
pub struct Allocator {
    shared: Arc<Shared>,
}

impl Allocator {
    fn build(
        policy: ReservationPolicy,
        backend: Arc<dyn Backend>,
        probe: Arc<dyn RegistryProbe>,
        pid: u32,
        threaded: bool,
    ) -> Result<Self, AllocError> {
        policy.validate()?;
        let arena = HeapArena::new(backend.as_ref(), policy.heap_limit)?;
        let registered = probe.is_registered(pid);
        let shared = Arc::new(Shared {
            pool: Mutex::new(MmapPool::new(policy.mmap_threshold, policy.table_size)),
            policy: RwLock::new(policy.clone()),
            base_policy: policy,
            arena: Mutex::new(arena),
            heap_arrivals: AtomicU64::new(0),
            heap_served: AtomicU64::new(0),
            heap_steps: AtomicU64::new(0),
            max_steps_queued: AtomicU64::new(0),
            large_live: Mutex::new(HashMap::new()),
            alloc_set: Mutex::new(Vec::new()),
            metrics: MetricsRecorder::default(),
            last_metrics: Mutex::new(AllocationMetrics::default()),
            managed: AtomicBool::new(registered),
            rounds: AtomicU64::new(0),
            last_probe: Mutex::new(Some(backend.now())),
            fast_served: AtomicU64::new(0),
            fallback: AtomicU64::new(0),
            shutdown: AtomicBool::new(false),
            worker: Mutex::new(None),
            backend,
            probe,
            pid,
            threaded,
        });
        if registered && threaded {
            Shared::spawn_worker(&shared);
        }
        Ok(Allocator { shared })
    }

    /// Creates an allocator for the current process. If the probe reports
    /// it as latency-critical, a management thread starts right away;
    /// otherwise allocation takes the default path and the probe is asked
    /// again at most once per interval from the allocation path.
    pub fn activate(
        policy: ReservationPolicy,
        backend: Arc<dyn Backend>,
        probe: Arc<dyn RegistryProbe>,
    ) -> Result<Self, AllocError> {
        Self::build(policy, backend, probe, std::process::id(), true)
    }

    /// Like [`activate`](Self::activate) but never starts a thread: the
    /// caller drives rounds with [`run_round`](Self::run_round) or
    /// [`begin_round`](Self::begin_round). Used by tests and the simulated
    /// benchmark.
    pub fn manual(
        policy: ReservationPolicy,
        backend: Arc<dyn Backend>,
        probe: Arc<dyn RegistryProbe>,
        pid: u32,
    ) -> Result<Self, AllocError> {
        Self::build(policy, backend, probe, pid, false)
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.shared.backend
    }

    pub fn is_managed(&self) -> bool {
        self.shared.managed.load(Ordering::Acquire)
    }

    pub fn has_worker(&self) -> bool {
        lock(&self.shared.worker)
            .as_ref()
            .is_some_and(|h| !h.is_finished())
    }

    pub fn allocate(&self, size: usize) -> Result<NonNull<u8>, AllocError> {
        self.allocate_traced(size).map(|(p, _)| p)
    }

    pub fn allocate_traced(&self, size: usize) -> Result<(NonNull<u8>, AllocPath), AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let s = &self.shared;
        s.maybe_probe();
        let large = s.base_policy.is_large(size as u64);
        s.metrics.record(size as u64, large);
        let (addr, path) = if large {
            s.allocate_large(size)?
        } else {
            s.allocate_small(size)?
        };
        s.record_fast(path);
        let ptr = NonNull::new(addr as *mut u8).expect("backend returned null");
        Ok((ptr, path))
    }

    pub fn deallocate(&self, ptr: NonNull<u8>) -> Result<(), AllocError> {
        self.shared.deallocate(ptr.as_ptr() as usize)
    }

    /// Starts a management round to be advanced one step at a time.
    pub fn begin_round(&self) -> ManagementRound {
        let n = self.shared.rounds.load(Ordering::Relaxed) + 1;
        ManagementRound::new(n)
    }

    /// Advances `round` by one backend-visible step. With `defer`, chunks
    /// reserved for the pool are returned in the report instead of being
    /// inserted, and the caller publishes them with
    /// [`insert_reserved`](Self::insert_reserved).
    pub fn step_round(&self, round: &mut ManagementRound, defer: bool) -> Result<Option<StepReport>, AllocError> {
        round.step(&self.shared, defer)
    }

    pub fn insert_reserved(&self, chunk: ChunkHandle) -> Result<(), AllocError> {
        lock(&self.shared.pool).insert(chunk)?;
        Ok(())
    }

    /// Runs a whole management round on the calling thread.
    pub fn run_round(&self) -> Result<RoundReport, AllocError> {
        let mut round = self.begin_round();
        let mut report = RoundReport::new(round.number());
        while let Some(step) = round.step(&self.shared, false)? {
            report.steps.push(step);
        }
        Ok(report)
    }

    /// Number of arena-lock management steps completed so far.
    pub fn heap_steps(&self) -> u64 {
        self.shared.heap_steps.load(Ordering::SeqCst)
    }

    /// Thresholds currently in force.
    pub fn policy(&self) -> ReservationPolicy {
        read_policy(&self.shared.policy).clone()
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let s = &self.shared;
        let (top_free, heap_committed, heap_pinned) = {
            let a = lock(&s.arena);
            (a.top_free(), a.region().committed() as u64, a.pinned_bytes())
        };
        let (pool_total, pool_occupancy) = {
            let p = lock(&s.pool);
            (p.total_size(), p.occupancy())
        };
        Diagnostics {
            managed: self.is_managed(),
            rounds: s.rounds.load(Ordering::Relaxed),
            policy: self.policy(),
            last_interval: *lock(&s.last_metrics),
            current: s.metrics.peek(),
            top_free,
            heap_committed,
            heap_pinned,
            pool_total,
            pool_occupancy,
            pending_shrink: lock(&s.alloc_set).len(),
            live_large: lock(&s.large_live).len(),
            fast_served: s.fast_served.load(Ordering::Relaxed),
            fallback: s.fallback.load(Ordering::Relaxed),
            max_steps_while_queued: s.max_steps_queued.load(Ordering::Relaxed),
        }
    }

    /// Checks the arena layout and pool bookkeeping.
    pub fn check_consistency(&self) -> Result<(), String> {
        let s = &self.shared;
        lock(&s.arena).check_layout()?;
        let pool = lock(&s.pool);
        let sum: u64 = pool.chunks().map(|(_, c)| c.length as u64).sum();
        if sum != pool.total_size() {
            return Err(format!("pool total {} but chunks sum to {sum}", pool.total_size()));
        }
        for (b, c) in pool.chunks() {
            let want = bucket_index(c.length as u64, s.base_policy.mmap_threshold, s.base_policy.table_size)
                .map_err(|e| e.to_string())?;
            if want != b {
                return Err(format!("chunk of {} bytes in bucket {b}, expected {want}", c.length));
            }
        }
        let live = lock(&s.large_live);
        for base in lock(&s.alloc_set).iter() {
            if let Some(l) = live.get(base) {
                if l.handle.length < l.requested {
                    return Err("pending-shrink chunk shorter than its request".into());
                }
            }
        }
        Ok(())
    }
}

impl Drop for Allocator {
    fn drop(&mut self) {
        let s = &self.shared;
        s.shutdown.store(true, Ordering::Release);
        if let Some(h) = lock(&s.worker).take() {
            h.thread().unpark();
            let _ = h.join();
        }
        let backend = s.backend.as_ref();
        for c in lock(&s.pool).drain() {
            let _ = backend.unmap_chunk(c);
        }
        for (_, l) in lock(&s.large_live).drain() {
            let _ = backend.unmap_chunk(l.handle);
        }
        let arena = lock(&s.arena);
        let _ = backend.release_region(arena.region());
    }
}

#[cfg(test)]
mod tests;
