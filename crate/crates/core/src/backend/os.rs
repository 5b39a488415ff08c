//! Backend over the running kernel.
//!
//! The region is one large `PROT_NONE` reservation; growing it makes the
//! next pages accessible and shrinking drops and re-protects them. A
//! library cannot safely own the real program break, but the contract (one
//! contiguous region, one end marker) is the same.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::os::unix::io::AsRawFd;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{
    check_aligned, host, Advice, AddrRange, Backend, BackendError, BackendEvent, BackendOp,
    BackendStats, ChunkHandle, PrefaultMode, Region, Result,
};

#[derive(Default)]
struct OsState {
    regions: BTreeMap<usize, (usize, usize)>,
    chunks: BTreeMap<usize, usize>,
    pinned: HashSet<usize>,
    events: Option<Vec<BackendEvent>>,
    seq: u64,
}

pub struct OsBackend {
    page: usize,
    epoch: Instant,
    state: Mutex<OsState>,
    calls: AtomicU64,
    locked_prefaults: AtomicU64,
    touched_prefaults: AtomicU64,
    last_mode: AtomicU8,
}

impl Default for OsBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl OsBackend {
    pub fn new() -> Self {
        OsBackend {
            page: host::page_size(),
            epoch: Instant::now(),
            state: Mutex::new(OsState::default()),
            calls: AtomicU64::new(0),
            locked_prefaults: AtomicU64::new(0),
            touched_prefaults: AtomicU64::new(0),
            last_mode: AtomicU8::new(0),
        }
    }

    /// Starts recording a call log (with the calling thread's name).
    pub fn record_events(&self) {
        self.lock().events.get_or_insert_with(Vec::new);
    }

    pub fn events(&self) -> Vec<BackendEvent> {
        self.lock().events.clone().unwrap_or_default()
    }

    /// `(locked, touched)` prefault counts.
    pub fn prefault_modes(&self) -> (u64, u64) {
        (
            self.locked_prefaults.load(Ordering::Relaxed),
            self.touched_prefaults.load(Ordering::Relaxed),
        )
    }

    fn lock(&self) -> MutexGuard<'_, OsState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn log(&self, st: &mut OsState, op: BackendOp, bytes: usize, elapsed: Duration) {
        st.seq += 1;
        let seq = st.seq;
        if let Some(events) = st.events.as_mut() {
            events.push(BackendEvent {
                seq,
                op,
                bytes: bytes as u64,
                elapsed,
                available_after: 0,
                thread: std::thread::current().name().map(str::to_string),
            });
        }
    }

    fn pages(&self, range: &AddrRange) -> impl Iterator<Item = usize> {
        let start = range.start / self.page * self.page;
        let end = range.end.div_ceil(self.page) * self.page;
        (start..end).step_by(self.page)
    }

    fn covers(st: &OsState, range: &AddrRange) -> bool {
        if let Some((&base, &(_, end))) = st.regions.range(..=range.start).next_back() {
            if base <= range.start && range.end <= end {
                return true;
            }
        }
        if let Some((&base, &len)) = st.chunks.range(..=range.start).next_back() {
            if range.end <= base + len {
                return true;
            }
        }
        false
    }

    fn forget_pins(&self, st: &mut OsState, range: AddrRange) {
        for p in self.pages(&range) {
            st.pinned.remove(&p);
        }
    }
}

impl Backend for OsBackend {
    fn page_size(&self) -> usize {
        self.page
    }

    fn reserve_region(&self, max_bytes: usize) -> Result<Region> {
        check_aligned("region size", max_bytes, self.page)?;
        let base = host::map_anon(max_bytes, false)?;
        self.lock().regions.insert(base, (max_bytes, base));
        Ok(Region {
            base,
            committed_end: base,
            limit: base + max_bytes,
        })
    }

    fn grow_region(&self, region: &mut Region, delta: usize) -> Result<AddrRange> {
        check_aligned("growth", delta, self.page)?;
        let old_end = region.committed_end;
        if delta == 0 {
            return Ok(old_end..old_end);
        }
        if delta > region.remaining() {
            return Err(BackendError::GrowthFailed {
                requested: delta,
                remaining: region.remaining(),
            });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let t = Instant::now();
        host::protect(old_end, delta, true)?;
        region.committed_end += delta;
        let mut st = self.lock();
        if let Some(r) = st.regions.get_mut(&region.base) {
            r.1 = region.committed_end;
        }
        self.log(&mut st, BackendOp::Grow, delta, t.elapsed());
        Ok(old_end..region.committed_end)
    }

    fn shrink_region(&self, region: &mut Region, delta: usize) -> Result<()> {
        check_aligned("shrink", delta, self.page)?;
        if delta > region.committed() {
            return Err(BackendError::contract(format!(
                "shrink by {delta} exceeds committed {}",
                region.committed()
            )));
        }
        if delta == 0 {
            return Ok(());
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let t = Instant::now();
        let new_end = region.committed_end - delta;
        let _ = host::unlock(new_end, delta);
        host::discard(new_end, delta)?;
        host::protect(new_end, delta, false)?;
        let mut st = self.lock();
        self.forget_pins(&mut st, new_end..region.committed_end);
        region.committed_end = new_end;
        if let Some(r) = st.regions.get_mut(&region.base) {
            r.1 = new_end;
        }
        self.log(&mut st, BackendOp::Shrink, delta, t.elapsed());
        Ok(())
    }

    fn release_region(&self, region: Region) -> Result<()> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut st = self.lock();
        self.forget_pins(&mut st, region.base..region.committed_end);
        st.regions.remove(&region.base);
        host::unmap(region.base, region.limit - region.base)?;
        Ok(())
    }

    fn map_chunk(&self, size: usize) -> Result<ChunkHandle> {
        if size < self.page {
            return Err(BackendError::contract("chunk smaller than one page"));
        }
        check_aligned("chunk size", size, self.page)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let t = Instant::now();
        let base = host::map_anon(size, true).map_err(|_| BackendError::MapFailed { size })?;
        let mut st = self.lock();
        st.chunks.insert(base, size);
        self.log(&mut st, BackendOp::Map, size, t.elapsed());
        Ok(ChunkHandle {
            base,
            length: size,
            pinned: false,
        })
    }

    fn resize_chunk(&self, handle: ChunkHandle, new_size: usize) -> Result<ChunkHandle> {
        if new_size < self.page {
            return Err(BackendError::contract("chunk smaller than one page"));
        }
        check_aligned("chunk size", new_size, self.page)?;
        let mut st = self.lock();
        if st.chunks.get(&handle.base) != Some(&handle.length) {
            return Err(BackendError::contract("resize of a chunk that is not live"));
        }
        if new_size == handle.length {
            return Ok(handle);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let t = Instant::now();
        if new_size < handle.length {
            self.forget_pins(&mut st, handle.base + new_size..handle.base + handle.length);
        }
        let base = host::remap(handle.base, handle.length, new_size)
            .map_err(|_| BackendError::MapFailed { size: new_size })?;
        st.chunks.remove(&handle.base);
        st.chunks.insert(base, new_size);
        if base != handle.base {
            let moved: Vec<usize> = self
                .pages(&(handle.base..handle.base + handle.length.min(new_size)))
                .filter(|p| st.pinned.remove(p))
                .collect();
            st.pinned
                .extend(moved.into_iter().map(|p| p - handle.base + base));
        }
        self.log(&mut st, BackendOp::Resize, new_size, t.elapsed());
        Ok(ChunkHandle {
            base,
            length: new_size,
            pinned: handle.pinned,
        })
    }

    fn unmap_chunk(&self, handle: ChunkHandle) -> Result<()> {
        let mut st = self.lock();
        if st.chunks.get(&handle.base) != Some(&handle.length) {
            return Err(BackendError::contract("unmap of a chunk that is not live"));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let t = Instant::now();
        host::unmap(handle.base, handle.length)?;
        st.chunks.remove(&handle.base);
        self.forget_pins(&mut st, handle.range());
        self.log(&mut st, BackendOp::Unmap, handle.length, t.elapsed());
        Ok(())
    }

    fn prefault(&self, range: AddrRange) -> Result<Duration> {
        if range.is_empty() {
            return Ok(Duration::ZERO);
        }
        if !Self::covers(&self.lock(), &range) {
            return Err(BackendError::contract("prefault outside committed memory"));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let start = range.start / self.page * self.page;
        let end = range.end.div_ceil(self.page) * self.page;
        let t = Instant::now();
        let mode = match host::lock(start, end - start) {
            Ok(()) => PrefaultMode::Locked,
            Err(e) => {
                log::debug!("mlock failed ({e}); touching pages instead");
                host::touch_pages(start, end - start, self.page);
                PrefaultMode::Touched
            }
        };
        let elapsed = t.elapsed();
        match mode {
            PrefaultMode::Locked => self.locked_prefaults.fetch_add(1, Ordering::Relaxed),
            _ => self.touched_prefaults.fetch_add(1, Ordering::Relaxed),
        };
        self.last_mode.store(mode as u8 + 1, Ordering::Relaxed);
        let mut st = self.lock();
        st.pinned.extend((start..end).step_by(self.page));
        self.log(&mut st, BackendOp::Prefault, end - start, elapsed);
        Ok(elapsed)
    }

    fn unpin(&self, range: AddrRange) -> Result<()> {
        if range.is_empty() {
            return Ok(());
        }
        let mut st = self.lock();
        if !self.pages(&range).all(|p| st.pinned.contains(&p)) {
            return Err(BackendError::contract("unpin of a range that is not pinned"));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let start = range.start / self.page * self.page;
        let end = range.end.div_ceil(self.page) * self.page;
        let t = Instant::now();
        let _ = host::unlock(start, end - start);
        self.forget_pins(&mut st, start..end);
        self.log(&mut st, BackendOp::Unpin, end - start, t.elapsed());
        Ok(())
    }

    fn touch(&self, range: AddrRange) -> Result<Duration> {
        if range.is_empty() {
            return Ok(Duration::ZERO);
        }
        let t = Instant::now();
        host::touch_pages(range.start, range.len(), self.page);
        Ok(t.elapsed())
    }

    fn memory_stats(&self) -> Result<BackendStats> {
        let meminfo = fs::read_to_string("/proc/meminfo")
            .map_err(|e| BackendError::Unavailable(format!("/proc/meminfo: {e}")))?;
        let mut stats = parse_meminfo(&meminfo)?;
        if let Ok(zoneinfo) = fs::read_to_string("/proc/zoneinfo") {
            let (min, low) = parse_zone_watermarks(&zoneinfo);
            stats.watermark_min = min * self.page as u64;
            stats.watermark_low = low * self.page as u64;
        }
        stats.pinned = (self.lock().pinned.len() * self.page) as u64;
        Ok(stats)
    }

    fn advise_release_file_cache(&self, file: &Path, length: u64) -> Result<Advice> {
        let f = match File::open(file) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                log::warn!("advise on missing file {}", file.display());
                return Ok(Advice::UnknownFile);
            }
            Err(e) => return Err(e.into()),
        };
        let len = if length == 0 { f.metadata()?.len() } else { length };
        // SAFETY: fd is valid for the lifetime of `f`.
        let ret = unsafe {
            libc::posix_fadvise(f.as_raw_fd(), 0, len as libc::off_t, libc::POSIX_FADV_DONTNEED)
        };
        if ret != 0 {
            return Err(std::io::Error::from_raw_os_error(ret).into());
        }
        let mut st = self.lock();
        self.log(&mut st, BackendOp::Advise, len as usize, Duration::ZERO);
        Ok(Advice::Released { bytes: len })
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn last_prefault_mode(&self) -> Option<PrefaultMode> {
        match self.last_mode.load(Ordering::Relaxed) {
            1 => Some(PrefaultMode::Locked),
            2 => Some(PrefaultMode::Touched),
            _ => None,
        }
    }
}

impl Drop for OsBackend {
    fn drop(&mut self) {
        let st = self.state.get_mut().unwrap_or_else(|e| e.into_inner());
        for (&base, &(len, _)) in &st.regions {
            let _ = host::unmap(base, len);
        }
        for (&base, &len) in &st.chunks {
            let _ = host::unmap(base, len);
        }
    }
}

/// Reads `MemTotal`, `MemAvailable` and `Cached` (kB) from /proc/meminfo.
pub(crate) fn parse_meminfo(text: &str) -> Result<BackendStats> {
    let field = |name: &str| -> Result<u64> {
        text.lines()
            .find_map(|l| l.strip_prefix(name)?.strip_prefix(':'))
            .and_then(|rest| rest.split_whitespace().next()?.parse::<u64>().ok())
            .map(|kb| kb * 1024)
            .ok_or_else(|| BackendError::Unavailable(format!("meminfo lacks {name}")))
    };
    Ok(BackendStats {
        total: field("MemTotal")?,
        available: field("MemAvailable")?,
        file_cache: field("Cached")?,
        ..BackendStats::default()
    })
}

/// Sums the per-zone `min` and `low` watermarks (in pages).
pub(crate) fn parse_zone_watermarks(text: &str) -> (u64, u64) {
    let mut min = 0;
    let mut low = 0;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("min"), Some(v)) => min += v.parse::<u64>().unwrap_or(0),
            (Some("low"), Some(v)) => low += v.parse::<u64>().unwrap_or(0),
            _ => {}
        }
    }
    (min, low)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meminfo_fields() {
        let text = "MemTotal:       16000000 kB\nMemFree:  100 kB\nMemAvailable:    8000000 kB\nBuffers: 1 kB\nCached:          2000000 kB\nSwapCached: 0 kB\n";
        let s = parse_meminfo(text).unwrap();
        assert_eq!(s.total, 16_000_000 * 1024);
        assert_eq!(s.available, 8_000_000 * 1024);
        assert_eq!(s.file_cache, 2_000_000 * 1024);
        assert!(matches!(
            parse_meminfo("MemTotal: 1 kB\n"),
            Err(BackendError::Unavailable(_))
        ));
    }

    #[test]
    fn zone_watermarks_sum() {
        let text = "Node 0, zone   Normal\n  pages free     100\n        min      10\n        low      12\n        high     14\nNode 0, zone DMA32\n        min      5\n        low      6\n";
        assert_eq!(parse_zone_watermarks(text), (15, 18));
    }

    #[test]
    fn region_grow_write_shrink() {
        let b = OsBackend::new();
        let page = b.page_size();
        let mut r = b.reserve_region(64 * page).unwrap();
        let range = b.grow_region(&mut r, 4 * page).unwrap();
        let t = b.prefault(range.clone()).unwrap();
        assert!(t >= Duration::ZERO);
        unsafe { std::ptr::write_bytes(range.start as *mut u8, 0xAB, range.len()) };
        b.unpin(range.clone()).unwrap();
        assert_eq!(b.memory_stats().map(|s| s.pinned).unwrap_or(0), 0);
        b.shrink_region(&mut r, 4 * page).unwrap();
        assert_eq!(r.committed(), 0);
        assert!(b.prefault(range).is_err());
        b.release_region(r).unwrap();
    }

    #[test]
    fn chunk_resize_keeps_prefix() {
        let b = OsBackend::new();
        let page = b.page_size();
        let c = b.map_chunk(32 * page).unwrap();
        unsafe { std::ptr::write_bytes(c.base as *mut u8, 0x5A, c.length) };
        let c2 = b.resize_chunk(c, 64 * page).unwrap();
        let s = unsafe { std::slice::from_raw_parts(c2.base as *const u8, 32 * page) };
        assert!(s.iter().all(|&x| x == 0x5A));
        let c3 = b.resize_chunk(c2, 8 * page).unwrap();
        assert_eq!(c3.base, c2.base);
        b.unmap_chunk(c3).unwrap();
        assert!(b.unmap_chunk(c3).is_err());
    }

    #[test]
    fn unpin_requires_pin() {
        let b = OsBackend::new();
        let c = b.map_chunk(b.page_size()).unwrap();
        assert!(matches!(
            b.unpin(c.range()),
            Err(BackendError::ContractViolation(_))
        ));
        b.prefault(c.range()).unwrap();
        assert!(b.last_prefault_mode().is_some());
        b.unpin(c.range()).unwrap();
    }

    #[test]
    fn advise_missing_file_is_no_op() {
        let b = OsBackend::new();
        assert_eq!(
            b.advise_release_file_cache(Path::new("/definitely/not/here"), 0)
                .unwrap(),
            Advice::UnknownFile
        );
    }
}
