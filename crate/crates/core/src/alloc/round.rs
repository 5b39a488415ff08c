use std::fmt;
use std::sync::atomic::Ordering;
use std::time::Duration;

use super::{lock_mutex, read_policy, update_thresholds, write_policy, AllocError, Shared};
use crate::backend::ChunkHandle;

pub const ROUND_CSV_HEADER: &str = "round,component,action,bytes,elapsed_us";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Heap,
    Mmap,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Heap => "heap",
            Component::Mmap => "mmap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Unpin pages handed to the application since the last round.
    Unpin,
    /// Pin top-chunk pages that are resident or committed but not pinned.
    Pin,
    /// Grow by `mem_chunk` and prefault it.
    Grow,
    Shrink,
    /// Trim a handed-out chunk down to its request.
    DelayRelease,
    /// Map and prefault one pool chunk.
    Map,
    Unmap,
    /// Release everything reserved after the process left the registry.
    Teardown,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Unpin => "unpin",
            Action::Pin => "pin",
            Action::Grow => "grow",
            Action::Shrink => "shrink",
            Action::DelayRelease => "delay-release",
            Action::Map => "map",
            Action::Unmap => "unmap",
            Action::Teardown => "teardown",
        })
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub round: u64,
    pub component: Component,
    pub action: Action,
    pub bytes: u64,
    /// Time spent in the step, on the backend's clock.
    pub elapsed: Duration,
    /// Whether the step ran under the arena lock.
    pub heap_lock: bool,
    /// A reserved chunk not yet published to the pool (deferred mode only).
    pub pending: Option<ChunkHandle>,
}

impl StepReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.round,
            self.component,
            self.action,
            self.bytes,
            self.elapsed.as_secs_f64() * 1e6
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct RoundReport {
    pub round: u64,
    pub steps: Vec<StepReport>,
}

impl RoundReport {
    pub fn new(round: u64) -> Self {
        RoundReport {
            round,
            steps: Vec::new(),
        }
    }

    pub fn calls(&self, component: Component, action: Action) -> impl Iterator<Item = &StepReport> {
        self.steps
            .iter()
            .filter(move |s| s.component == component && s.action == action)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ROUND_CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&s.csv_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    Start,
    Unpin,
    Pin,
    HeapDecide,
    HeapGrow { target: u64, reserved: u64 },
    HeapShrink(u64),
    DelayRelease,
    MmapDecide,
    MmapReserve { reserved: u64 },
    MmapTrim,
    TeardownHeap,
    TeardownMmap,
    Done,
}

/// One management round, advanced a step at a time. Each step does at most
/// one unit of backend work so that callers can interleave application
/// requests between steps.
#[derive(Debug)]
pub struct ManagementRound {
    number: u64,
    phase: Phase,
}

impl ManagementRound {
    pub(crate) fn new(number: u64) -> Self {
        ManagementRound {
            number,
            phase: Phase::Start,
        }
    }

    pub fn number(&self) -> u64 {
        self.number
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub(crate) fn step(&mut self, s: &Shared, defer: bool) -> Result<Option<StepReport>, AllocError> {
        loop {
            if let Some(r) = self.advance(s, defer)? {
                return Ok(Some(r));
            }
            if self.phase == Phase::Done {
                return Ok(None);
            }
        }
    }

    fn report(&self, component: Component, action: Action, bytes: u64, elapsed: Duration) -> StepReport {
        StepReport {
            round: self.number,
            component,
            action,
            bytes,
            elapsed,
            heap_lock: component == Component::Heap,
            pending: None,
        }
    }

    /// Performs the next piece of work. Returns a report when a backend call
    /// was made.
    fn advance(&mut self, s: &Shared, defer: bool) -> Result<Option<StepReport>, AllocError> {
        let backend = s.backend.as_ref();
        let page = backend.page_size() as u64;
        match self.phase.clone() {
            Phase::Start => {
                s.rounds.fetch_add(1, Ordering::Relaxed);
                let metrics = {
                    let mut last = lock_mutex(&s.last_metrics);
                    let m = s.metrics.rollover(&last);
                    *last = m;
                    m
                };
                let registered = s.probe_registered();
                let was = s.managed.load(Ordering::Acquire);
                if !registered {
                    s.managed.store(false, Ordering::Release);
                    self.phase = if was || self.holds_reserves(s) {
                        Phase::TeardownHeap
                    } else {
                        Phase::Done
                    };
                    return Ok(None);
                }
                s.managed.store(true, Ordering::Release);
                let next = update_thresholds(&metrics, &read_policy(&s.policy));
                *write_policy(&s.policy) = next;
                self.phase = Phase::Unpin;
                Ok(None)
            }
            Phase::Unpin => {
                self.phase = Phase::Pin;
                let t0 = backend.now();
                let bytes = s.heap_step(|a| -> Result<Option<u64>, AllocError> {
                    if !a.has_handed_out() {
                        return Ok(None);
                    }
                    let mut bytes = 0;
                    for r in a.take_handed_out() {
                        bytes += r.len() as u64;
                        backend.unpin(r)?;
                    }
                    Ok(Some(bytes))
                })?;
                Ok(bytes.map(|b| self.report(Component::Heap, Action::Unpin, b, backend.now() - t0)))
            }
            Phase::Pin => {
                self.phase = Phase::HeapDecide;
                let t0 = backend.now();
                let bytes = s.heap_step(|a| -> Result<Option<u64>, AllocError> {
                    let gaps = a.unpinned_top_pages();
                    if gaps.is_empty() {
                        return Ok(None);
                    }
                    let mut bytes = 0;
                    for r in gaps {
                        bytes += r.len() as u64;
                        a.pin_range(backend, r)?;
                    }
                    Ok(Some(bytes))
                })?;
                Ok(bytes.map(|b| self.report(Component::Heap, Action::Pin, b, backend.now() - t0)))
            }
            Phase::HeapDecide => {
                let t = read_policy(&s.policy).heap;
                let top = lock_mutex(&s.arena).top_free();
                self.phase = if top < t.rsv_thr {
                    Phase::HeapGrow {
                        target: t.tgt_mem - top,
                        reserved: 0,
                    }
                } else if top > t.trim_thr {
                    Phase::HeapShrink((top - t.trim_thr) / page * page)
                } else {
                    Phase::DelayRelease
                };
                Ok(None)
            }
            Phase::HeapGrow { target, reserved } => {
                if reserved >= target {
                    self.phase = Phase::DelayRelease;
                    return Ok(None);
                }
                let chunk = read_policy(&s.policy).heap.mem_chunk;
                let t0 = backend.now();
                match s.heap_step(|a| a.reserve_step(backend, chunk as usize)) {
                    Ok(_) => {
                        self.phase = Phase::HeapGrow {
                            target,
                            reserved: reserved + chunk,
                        };
                        Ok(Some(self.report(Component::Heap, Action::Grow, chunk, backend.now() - t0)))
                    }
                    Err(e) => {
                        log::warn!("heap reservation stopped after {reserved} bytes: {e}");
                        self.phase = Phase::DelayRelease;
                        Ok(None)
                    }
                }
            }
            Phase::HeapShrink(delta) => {
                self.phase = Phase::DelayRelease;
                if delta == 0 {
                    return Ok(None);
                }
                let t0 = backend.now();
                s.heap_step(|a| a.shrink(backend, delta as usize))?;
                Ok(Some(self.report(Component::Heap, Action::Shrink, delta, backend.now() - t0)))
            }
            Phase::DelayRelease => {
                let next = lock_mutex(&s.alloc_set).pop();
                let Some(base) = next else {
                    self.phase = Phase::MmapDecide;
                    return Ok(None);
                };
                let t0 = backend.now();
                let released = s.shrink_handed_out(base)?;
                if released == 0 {
                    return Ok(None);
                }
                Ok(Some(self.report(
                    Component::Mmap,
                    Action::DelayRelease,
                    released,
                    backend.now() - t0,
                )))
            }
            Phase::MmapDecide => {
                let t = read_policy(&s.policy).mmap;
                let total = lock_mutex(&s.pool).total_size();
                self.phase = if total < t.rsv_thr {
                    Phase::MmapReserve { reserved: 0 }
                } else {
                    Phase::MmapTrim
                };
                Ok(None)
            }
            Phase::MmapReserve { reserved } => {
                let t = read_policy(&s.policy).mmap;
                if reserved >= t.tgt_mem {
                    self.phase = Phase::MmapTrim;
                    return Ok(None);
                }
                let t0 = backend.now();
                let chunk = match backend.map_chunk(t.mem_chunk as usize) {
                    Ok(c) => c,
                    Err(e) => {
                        log::warn!("pool reservation stopped after {reserved} bytes: {e}");
                        self.phase = Phase::MmapTrim;
                        return Ok(None);
                    }
                };
                if let Err(e) = backend.prefault(chunk.range()) {
                    log::warn!("pool prefault failed: {e}");
                    backend.unmap_chunk(chunk)?;
                    self.phase = Phase::MmapTrim;
                    return Ok(None);
                }
                let chunk = ChunkHandle {
                    pinned: true,
                    ..chunk
                };
                self.phase = Phase::MmapReserve {
                    reserved: reserved + t.mem_chunk,
                };
                let mut rep = self.report(Component::Mmap, Action::Map, t.mem_chunk, backend.now() - t0);
                if defer {
                    rep.pending = Some(chunk);
                } else {
                    lock_mutex(&s.pool).insert(chunk)?;
                }
                Ok(Some(rep))
            }
            Phase::MmapTrim => {
                let trim = read_policy(&s.policy).mmap.trim_thr;
                let victim = {
                    let mut pool = lock_mutex(&s.pool);
                    if pool.total_size() > trim {
                        pool.take_smallest()
                    } else {
                        None
                    }
                };
                let Some(c) = victim else {
                    self.phase = Phase::Done;
                    return Ok(None);
                };
                let t0 = backend.now();
                backend.unmap_chunk(c)?;
                Ok(Some(self.report(
                    Component::Mmap,
                    Action::Unmap,
                    c.length as u64,
                    backend.now() - t0,
                )))
            }
            Phase::TeardownHeap => {
                self.phase = Phase::TeardownMmap;
                *write_policy(&s.policy) = s.base_policy.clone();
                let t0 = backend.now();
                let bytes = s.heap_step(|a| a.release_reserves(backend))?;
                Ok(Some(self.report(Component::Heap, Action::Teardown, bytes, backend.now() - t0)))
            }
            Phase::TeardownMmap => {
                self.phase = Phase::Done;
                while let Some(base) = lock_mutex(&s.alloc_set).pop() {
                    s.shrink_handed_out(base)?;
                }
                let t0 = backend.now();
                let chunks = lock_mutex(&s.pool).drain();
                if chunks.is_empty() {
                    return Ok(None);
                }
                let mut bytes = 0;
                for c in chunks {
                    bytes += c.length as u64;
                    backend.unmap_chunk(c)?;
                }
                Ok(Some(self.report(Component::Mmap, Action::Teardown, bytes, backend.now() - t0)))
            }
            Phase::Done => Ok(None),
        }
    }

    fn holds_reserves(&self, s: &Shared) -> bool {
        let a = lock_mutex(&s.arena);
        a.top_free() >= backend_page(s) || a.pinned_bytes() > 0 || a.has_handed_out() || {
            drop(a);
            !lock_mutex(&s.pool).is_empty()
        }
    }
}

fn backend_page(s: &Shared) -> u64 {
    s.backend.page_size() as u64
}
