use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::time::Duration;

use super::AllocError;
use crate::backend::{Backend, Region};

pub const ALIGN: usize = 16;

/// Where a small request was carved from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallSource {
    FreeList,
    TopChunk,
    /// The top chunk was short; the region grew on the allocating thread.
    Grown,
}

/// One contiguous growable region: an allocated area with a first-fit free
/// list below `alloc_end`, and the top chunk between `alloc_end` and the
/// committed end. Free-list metadata is kept out of band.
#[derive(Debug)]
pub struct HeapArena {
    region: Region,
    page: usize,
    alloc_end: usize,
    free: BTreeMap<usize, usize>,
    free_bytes: usize,
    live: HashMap<usize, usize>,
    /// Pinned page spans, start -> end.
    pinned: BTreeMap<usize, usize>,
    /// Spans handed to the application while pinned, unpinned in bulk by the
    /// next management round.
    handed_out: Vec<Range<usize>>,
}

pub fn round_size(size: usize) -> usize {
    size.max(1).div_ceil(ALIGN) * ALIGN
}

impl HeapArena {
    pub fn new(backend: &dyn Backend, limit: u64) -> Result<Self, AllocError> {
        let region = backend.reserve_region(limit as usize)?;
        Ok(HeapArena {
            alloc_end: region.base,
            region,
            page: backend.page_size(),
            free: BTreeMap::new(),
            free_bytes: 0,
            live: HashMap::new(),
            pinned: BTreeMap::new(),
            handed_out: Vec::new(),
        })
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn top_free(&self) -> u64 {
        (self.region.committed_end - self.alloc_end) as u64
    }

    pub fn alloc_end(&self) -> usize {
        self.alloc_end
    }

    pub fn free_list_bytes(&self) -> u64 {
        self.free_bytes as u64
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn live_bytes(&self) -> u64 {
        self.live.values().map(|&l| l as u64).sum()
    }

    pub fn owns(&self, addr: usize) -> bool {
        self.region.base <= addr && addr < self.region.committed_end
    }

    pub fn pinned_bytes(&self) -> u64 {
        self.pinned.iter().map(|(s, e)| (e - s) as u64).sum()
    }

    pub fn pinned_spans(&self) -> Vec<Range<usize>> {
        self.pinned.iter().map(|(&s, &e)| s..e).collect()
    }

    /// Serves a small request with no backend call when the free list or the
    /// top chunk has room. Returns `None` when the region would have to grow.
    pub fn try_allocate(&mut self, size: usize) -> Option<(usize, SmallSource)> {
        let need = round_size(size);
        let hit = self
            .free
            .iter()
            .find(|(_, &len)| len >= need)
            .map(|(&s, &len)| (s, len));
        let (addr, source) = if let Some((start, len)) = hit {
            self.free.remove(&start);
            self.free_bytes -= len;
            if len > need {
                self.free.insert(start + need, len - need);
                self.free_bytes += len - need;
            }
            (start, SmallSource::FreeList)
        } else if self.top_free() >= need as u64 {
            let a = self.alloc_end;
            self.alloc_end += need;
            (a, SmallSource::TopChunk)
        } else {
            return None;
        };
        self.live.insert(addr, need);
        self.hand_out(addr..addr + need);
        Some((addr, source))
    }

    /// Default-path growth: extends the region by the page-rounded deficit
    /// without prefaulting, then carves the request from the top chunk.
    pub fn allocate_growing(&mut self, backend: &dyn Backend, size: usize) -> Result<usize, AllocError> {
        if let Some((addr, _)) = self.try_allocate(size) {
            return Ok(addr);
        }
        let need = round_size(size);
        let deficit = need - self.top_free() as usize;
        let delta = deficit.div_ceil(self.page) * self.page;
        backend.grow_region(&mut self.region, delta)?;
        let (addr, _) = self.try_allocate(size).expect("top chunk grown to fit");
        Ok(addr)
    }

    fn hand_out(&mut self, range: Range<usize>) {
        let span = self.page_span(&range);
        for r in self.take_pinned(span) {
            self.handed_out.push(r);
        }
    }

    fn page_span(&self, r: &Range<usize>) -> Range<usize> {
        r.start / self.page * self.page..r.end.div_ceil(self.page) * self.page
    }

    /// Removes `span` from the pinned map, returning the pieces that were
    /// pinned.
    fn take_pinned(&mut self, span: Range<usize>) -> Vec<Range<usize>> {
        let mut hits = Vec::new();
        let overlapping: Vec<(usize, usize)> = self
            .pinned
            .range(..span.end)
            .rev()
            .take_while(|(_, &e)| e > span.start)
            .map(|(&s, &e)| (s, e))
            .collect();
        for (s, e) in overlapping {
            self.pinned.remove(&s);
            if s < span.start {
                self.pinned.insert(s, span.start);
            }
            if e > span.end {
                self.pinned.insert(span.end, e);
            }
            hits.push(s.max(span.start)..e.min(span.end));
        }
        hits
    }

    fn add_pinned(&mut self, r: Range<usize>) {
        let (mut s, mut e) = (r.start, r.end);
        if let Some((&ps, &pe)) = self.pinned.range(..=s).next_back() {
            if pe >= s {
                s = ps;
                e = e.max(pe);
                self.pinned.remove(&ps);
            }
        }
        if let Some(&ne) = self.pinned.get(&e) {
            self.pinned.remove(&e);
            e = ne;
        }
        self.pinned.insert(s, e);
    }

    /// Spans that were pinned when handed out and still need an unpin.
    pub fn take_handed_out(&mut self) -> Vec<Range<usize>> {
        std::mem::take(&mut self.handed_out)
    }

    pub fn has_handed_out(&self) -> bool {
        !self.handed_out.is_empty()
    }

    pub fn deallocate(&mut self, addr: usize) -> Result<(), AllocError> {
        let len = self.live.remove(&addr).ok_or(AllocError::UnknownAddress(addr))?;
        let (mut start, mut end) = (addr, addr + len);
        if let Some((&ps, &pl)) = self.free.range(..start).next_back() {
            if ps + pl == start {
                self.free.remove(&ps);
                self.free_bytes -= pl;
                start = ps;
            }
        }
        if let Some(nl) = self.free.remove(&end) {
            self.free_bytes -= nl;
            end += nl;
        }
        if end == self.alloc_end {
            self.alloc_end = start;
        } else {
            self.free.insert(start, end - start);
            self.free_bytes += end - start;
        }
        Ok(())
    }

    /// One gradual-reservation iteration: grow by `chunk` and prefault it.
    pub fn reserve_step(&mut self, backend: &dyn Backend, chunk: usize) -> Result<Duration, AllocError> {
        let range = backend.grow_region(&mut self.region, chunk)?;
        let cost = backend.prefault(range.clone())?;
        self.add_pinned(range);
        Ok(cost)
    }

    /// Whole top-chunk pages that are not pinned (freed back into the top
    /// chunk, or grown on the default path).
    pub fn unpinned_top_pages(&self) -> Vec<Range<usize>> {
        let start = self.alloc_end.div_ceil(self.page) * self.page;
        let end = self.region.committed_end;
        let mut gaps = Vec::new();
        let mut cur = start;
        for (&s, &e) in self.pinned.range(..end) {
            if e <= cur {
                continue;
            }
            if s > cur {
                gaps.push(cur..s.min(end));
            }
            cur = cur.max(e);
        }
        if cur < end {
            gaps.push(cur..end);
        }
        gaps
    }

    pub fn pin_range(&mut self, backend: &dyn Backend, r: Range<usize>) -> Result<Duration, AllocError> {
        let cost = backend.prefault(r.clone())?;
        self.add_pinned(r);
        Ok(cost)
    }

    /// Releases `delta` bytes (a page multiple) from the end of the top
    /// chunk.
    pub fn shrink(&mut self, backend: &dyn Backend, delta: usize) -> Result<(), AllocError> {
        debug_assert!(delta as u64 <= self.top_free());
        let new_end = self.region.committed_end - delta;
        backend.shrink_region(&mut self.region, delta)?;
        self.take_pinned(new_end..new_end + delta);
        self.handed_out = std::mem::take(&mut self.handed_out)
            .into_iter()
            .filter_map(|r| {
                let end = r.end.min(new_end);
                (r.start < end).then_some(r.start..end)
            })
            .collect();
        Ok(())
    }

    /// Gives back everything reserved: the whole region when nothing is
    /// live, otherwise the whole pages of the top chunk, with every
    /// remaining pin dropped. Returns the bytes released or unpinned.
    pub fn release_reserves(&mut self, backend: &dyn Backend) -> Result<u64, AllocError> {
        if self.live.is_empty() {
            let committed = self.region.committed() as u64;
            self.release_all(backend)?;
            return Ok(committed);
        }
        let mut bytes = 0;
        for r in self.take_handed_out() {
            bytes += r.len() as u64;
            backend.unpin(r)?;
        }
        let keep = self.alloc_end.div_ceil(self.page) * self.page;
        let delta = self.region.committed_end.saturating_sub(keep);
        if delta > 0 {
            self.shrink(backend, delta)?;
            bytes += delta as u64;
        }
        for r in self.pinned_spans() {
            bytes += r.len() as u64;
            backend.unpin(r)?;
        }
        self.pinned.clear();
        Ok(bytes)
    }

    /// Returns every committed page once nothing is live. Pending unpins are
    /// dropped along with the pages.
    pub fn release_all(&mut self, backend: &dyn Backend) -> Result<bool, AllocError> {
        if !self.live.is_empty() {
            return Ok(false);
        }
        self.free.clear();
        self.free_bytes = 0;
        self.handed_out.clear();
        self.alloc_end = self.region.base;
        let committed = self.region.committed();
        if committed > 0 {
            backend.shrink_region(&mut self.region, committed)?;
        }
        self.pinned.clear();
        Ok(true)
    }

    /// Tears the region down entirely.
    pub fn destroy(self, backend: &dyn Backend) -> Result<(), AllocError> {
        backend.release_region(self.region)?;
        Ok(())
    }

    /// Checks the accounting identity: live + free list + top chunk covers
    /// the committed region exactly, with no overlaps.
    pub fn check_layout(&self) -> Result<(), String> {
        let mut spans: Vec<(usize, usize, &str)> = self
            .live
            .iter()
            .map(|(&a, &l)| (a, l, "live"))
            .chain(self.free.iter().map(|(&a, &l)| (a, l, "free")))
            .collect();
        spans.sort_unstable();
        let mut cur = self.region.base;
        for (a, l, kind) in spans {
            if a != cur {
                return Err(format!("{kind} span at {a:#x} but expected {cur:#x}"));
            }
            cur = a + l;
        }
        if cur != self.alloc_end {
            return Err(format!("allocated area ends at {cur:#x}, alloc_end {:#x}", self.alloc_end));
        }
        if self.alloc_end > self.region.committed_end {
            return Err("alloc_end past committed end".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SimBackend, SimConfig};
    use crate::config::GB;

    fn setup() -> (SimBackend, HeapArena) {
        let sim = SimBackend::new(SimConfig::with_capacity(GB)).unwrap();
        let arena = HeapArena::new(&sim, 64 << 20).unwrap();
        (sim, arena)
    }

    #[test]
    fn free_then_reuse_same_range() {
        let (sim, mut a) = setup();
        let p = a.allocate_growing(&sim, 1024).unwrap();
        let q = a.allocate_growing(&sim, 1024).unwrap();
        a.deallocate(p).unwrap();
        let r = a.try_allocate(1024).unwrap();
        assert_eq!(r, (p, SmallSource::FreeList));
        assert!(a.deallocate(q + 1).is_err());
        a.check_layout().unwrap();
    }

    #[test]
    fn frees_coalesce_into_top() {
        let (sim, mut a) = setup();
        let ptrs: Vec<_> = (0..8).map(|_| a.allocate_growing(&sim, 100).unwrap()).collect();
        for p in ptrs.iter().rev().skip(1) {
            a.deallocate(*p).unwrap();
        }
        assert_eq!(a.free.len(), 1);
        a.deallocate(ptrs[7]).unwrap();
        assert!(a.free.is_empty());
        assert_eq!(a.alloc_end(), a.region().base);
        a.check_layout().unwrap();
    }

    #[test]
    fn top_chunk_serve_needs_no_backend_call() {
        let (sim, mut a) = setup();
        a.reserve_step(&sim, 16384).unwrap();
        let before = sim.call_count();
        let (p, src) = a.try_allocate(1024).unwrap();
        assert_eq!(src, SmallSource::TopChunk);
        assert_eq!(p % ALIGN, 0);
        assert_eq!(sim.call_count(), before);
        assert_eq!(a.top_free(), 16384 - 1024);
    }

    #[test]
    fn handoff_moves_pages_out_of_pinned_set() {
        let (sim, mut a) = setup();
        a.reserve_step(&sim, 4 * 4096).unwrap();
        a.try_allocate(5000).unwrap();
        assert_eq!(a.pinned_bytes(), 2 * 4096);
        let spans = a.take_handed_out();
        assert_eq!(spans.iter().map(|r| r.len()).sum::<usize>(), 2 * 4096);
        for r in spans {
            sim.unpin(r).unwrap();
        }
        assert_eq!(sim.memory_stats().unwrap().pinned, 2 * 4096);
        // both remaining top pages are whole and pinned
        assert!(a.unpinned_top_pages().is_empty());
    }

    #[test]
    fn shrink_and_release() {
        let (sim, mut a) = setup();
        for _ in 0..4 {
            a.reserve_step(&sim, 4096).unwrap();
        }
        assert_eq!(a.pinned_spans().len(), 1);
        a.shrink(&sim, 2 * 4096).unwrap();
        assert_eq!(a.top_free(), 2 * 4096);
        assert_eq!(a.pinned_bytes(), 2 * 4096);
        assert!(a.release_all(&sim).unwrap());
        assert_eq!(sim.memory_stats().unwrap().available, GB);
    }
}
