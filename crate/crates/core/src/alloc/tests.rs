use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;

use super::*;
use crate::backend::{Backend, SimBackend, SimConfig};
use crate::config::{GB, KB, MB};

struct Fixture {
    sim: Arc<SimBackend>,
    registered: Arc<AtomicBool>,
    alloc: Allocator,
}

fn fixture(policy: ReservationPolicy, registered: bool) -> Fixture {
    let sim = Arc::new(SimBackend::new(SimConfig::with_capacity(4 * GB)).unwrap());
    let flag = Arc::new(AtomicBool::new(registered));
    let f2 = Arc::clone(&flag);
    let probe: Arc<dyn RegistryProbe> = Arc::new(move |_pid: u32| f2.load(Ordering::SeqCst));
    let backend: Arc<dyn Backend> = sim.clone();
    let alloc = Allocator::manual(policy, backend, probe, 4242).unwrap();
    Fixture {
        sim,
        registered: flag,
        alloc,
    }
}

fn policy_with_min(min_rsv: u64) -> ReservationPolicy {
    let mut p = ReservationPolicy {
        min_rsv,
        ..ReservationPolicy::default()
    };
    p.reset_thresholds();
    p
}

fn addr(p: NonNull<u8>) -> usize {
    p.as_ptr() as usize
}

/// Maps and prefaults a chunk the way a management round would.
fn pool_chunk(sim: &SimBackend, len: u64) -> ChunkHandle {
    let c = sim.map_chunk(len as usize).unwrap();
    sim.prefault(c.range()).unwrap();
    ChunkHandle { pinned: true, ..c }
}

#[test]
fn registered_first_round_reserves_floor() {
    let f = fixture(ReservationPolicy::default(), true);
    assert!(f.alloc.is_managed());
    f.alloc.run_round().unwrap();
    let d = f.alloc.diagnostics();
    assert!(d.top_free >= 5 * MB);
    assert!(d.pool_total >= 5 * MB);
    assert_eq!(d.pool_occupancy[1], (d.pool_total / (128 * KB)) as usize);
}

#[test]
fn unregistered_takes_default_path() {
    let f = fixture(ReservationPolicy::default(), false);
    assert!(!f.alloc.is_managed());
    let (p, path) = f.alloc.allocate_traced(1024).unwrap();
    assert_eq!(path, AllocPath::SmallGrown);
    let (q, path) = f.alloc.allocate_traced(256 * KB as usize).unwrap();
    assert_eq!(path, AllocPath::LargeMapped);
    f.alloc.deallocate(q).unwrap();
    f.alloc.deallocate(p).unwrap();
    assert_eq!(f.alloc.diagnostics().pool_total, 0);
}

#[test]
fn registration_after_start_activates_at_next_round() {
    let f = fixture(ReservationPolicy::default(), false);
    f.alloc.run_round().unwrap();
    assert!(!f.alloc.is_managed());
    assert_eq!(f.alloc.diagnostics().top_free, 0);
    f.registered.store(true, Ordering::SeqCst);
    f.alloc.run_round().unwrap();
    assert!(f.alloc.is_managed());
    assert!(f.alloc.diagnostics().top_free >= 5 * MB);
}

#[test]
fn threaded_activation_and_lazy_probe() {
    let sim: Arc<dyn Backend> = Arc::new(SimBackend::new(SimConfig::with_capacity(GB)).unwrap());
    let flag = Arc::new(AtomicBool::new(false));
    let f2 = Arc::clone(&flag);
    let probe: Arc<dyn RegistryProbe> = Arc::new(move |_pid: u32| f2.load(Ordering::SeqCst));
    let alloc = Allocator::activate(ReservationPolicy::default(), sim.clone(), probe).unwrap();
    assert!(!alloc.has_worker());
    alloc.allocate(64).unwrap();
    assert!(!alloc.has_worker());
    flag.store(true, Ordering::SeqCst);
    // sim clock only moves with backend work; burn an interval's worth
    while sim.now() < Duration::from_millis(3) {
        let c = sim.map_chunk(4096).unwrap();
        sim.touch(c.range()).unwrap();
        sim.unmap_chunk(c).unwrap();
    }
    alloc.allocate(64).unwrap();
    assert!(alloc.is_managed());
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while alloc.diagnostics().top_free < 5 * MB {
        assert!(std::time::Instant::now() < deadline, "management thread never reserved");
        std::thread::sleep(Duration::from_millis(2));
    }
    flag.store(false, Ordering::SeqCst);
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while alloc.has_worker() {
        assert!(std::time::Instant::now() < deadline, "management thread did not stop");
        std::thread::sleep(Duration::from_millis(2));
    }
    assert!(!alloc.is_managed());
}

#[test]
fn small_from_top_chunk_makes_no_backend_call() {
    let f = fixture(ReservationPolicy::default(), true);
    f.alloc.run_round().unwrap();
    let before = f.sim.call_count();
    let (p, path) = f.alloc.allocate_traced(1024).unwrap();
    assert_eq!(path, AllocPath::SmallTopChunk);
    assert_eq!(addr(p) % ALIGN, 0);
    assert_eq!(f.sim.call_count(), before);
}

#[test]
fn small_free_then_reuse() {
    let f = fixture(ReservationPolicy::default(), true);
    f.alloc.run_round().unwrap();
    let p = f.alloc.allocate(1024).unwrap();
    let _q = f.alloc.allocate(1024).unwrap();
    f.alloc.deallocate(p).unwrap();
    let (r, path) = f.alloc.allocate_traced(1024).unwrap();
    assert_eq!((r, path), (p, AllocPath::SmallFreeList));
    assert!(matches!(f.alloc.deallocate(p), Ok(())));
    assert!(matches!(
        f.alloc.deallocate(p),
        Err(AllocError::UnknownAddress(_))
    ));
}

#[test]
fn large_exact_chunk_comes_from_largest_fallback() {
    let f = fixture(ReservationPolicy::default(), true);
    let c = pool_chunk(&f.sim, 256 * KB);
    f.alloc.insert_reserved(c).unwrap();
    assert_eq!(f.alloc.diagnostics().pool_occupancy[2], 1);
    let calls = f.sim.call_count();
    let (p, path) = f.alloc.allocate_traced(256 * KB as usize).unwrap();
    assert_eq!(path, AllocPath::LargeLargest);
    assert_eq!(addr(p), c.base);
    assert_eq!(f.alloc.diagnostics().pool_total, 0);
    // the only backend call is the handoff unpin
    assert_eq!(f.sim.call_count(), calls + 1);
    assert_eq!(f.sim.memory_stats().unwrap().pinned, 0);
}

#[test]
fn large_on_empty_pool_maps_fresh() {
    let f = fixture(ReservationPolicy::default(), true);
    let before = f.sim.live_bytes();
    let (_, path) = f.alloc.allocate_traced(200 * KB as usize).unwrap();
    assert_eq!(path, AllocPath::LargeMapped);
    assert_eq!(f.sim.live_bytes() - before, 200 * KB);
}

#[test]
fn large_smaller_chunk_is_resized_up() {
    let f = fixture(ReservationPolicy::default(), true);
    f.alloc.insert_reserved(pool_chunk(&f.sim, 128 * KB)).unwrap();
    let (p, path) = f.alloc.allocate_traced(256 * KB as usize).unwrap();
    assert_eq!(path, AllocPath::LargeResized);
    unsafe { std::ptr::write_bytes(p.as_ptr(), 0xab, 256 * KB as usize) };
}

#[test]
fn large_free_recycles_below_trim() {
    let f = fixture(ReservationPolicy::default(), true);
    let p = f.alloc.allocate(256 * KB as usize).unwrap();
    f.alloc.deallocate(p).unwrap();
    let d = f.alloc.diagnostics();
    assert_eq!(d.pool_total, 256 * KB);
    assert_eq!(d.pool_occupancy[2], 1);
}

#[test]
fn large_free_unmaps_at_trim() {
    let f = fixture(policy_with_min(MB), true);
    // trim_thr is 2 MB: fill the pool to it
    for _ in 0..8 {
        f.alloc.insert_reserved(pool_chunk(&f.sim, 256 * KB)).unwrap();
    }
    let p = f.alloc.allocate(300 * KB as usize).unwrap();
    let avail = f.sim.memory_stats().unwrap().available;
    for _ in 0..7 {
        f.alloc.insert_reserved(pool_chunk(&f.sim, 128 * KB)).unwrap();
    }
    let total = f.alloc.diagnostics().pool_total;
    assert!(total + 300 * KB > f.alloc.policy().mmap.trim_thr);
    let avail2 = f.sim.memory_stats().unwrap().available;
    f.alloc.deallocate(p).unwrap();
    assert_eq!(f.alloc.diagnostics().pool_total, total);
    assert!(f.sim.memory_stats().unwrap().available > avail2);
    assert!(avail >= avail2);
}

/// Allocates `n` small requests of `size` on the default path.
fn fill(alloc: &Allocator, n: usize, size: usize) -> Vec<NonNull<u8>> {
    (0..n).map(|_| alloc.allocate(size).unwrap()).collect()
}

#[test]
fn heap_round_grows_in_mem_chunk_steps() {
    let f = fixture(ReservationPolicy::default(), false);
    let mut ptrs = fill(&f.alloc, 10 * 1024, 1024);
    for p in ptrs.drain(ptrs.len() - 2..) {
        f.alloc.deallocate(p).unwrap();
    }
    assert_eq!(f.alloc.diagnostics().top_free, 2 * KB);
    f.registered.store(true, Ordering::SeqCst);
    let report = f.alloc.run_round().unwrap();
    let pol = f.alloc.policy();
    assert_eq!(pol.heap.tgt_mem, 20 * MB);
    assert_eq!(pol.heap.rsv_thr, 10 * MB);
    assert_eq!(pol.heap.mem_chunk, 4 * KB);
    let grows: Vec<_> = report.calls(Component::Heap, Action::Grow).collect();
    let expected = (20 * MB - 2 * KB).div_ceil(4 * KB);
    assert_eq!(grows.len() as u64, expected);
    assert!(grows.iter().all(|s| s.bytes == 4 * KB && s.heap_lock));
    assert_eq!(f.alloc.diagnostics().top_free, 2 * KB + expected * 4 * KB);
}

#[test]
fn heap_round_dead_band_makes_no_calls() {
    let f = fixture(ReservationPolicy::default(), true);
    f.alloc.run_round().unwrap();
    let before = f.sim.call_count();
    let report = f.alloc.run_round().unwrap();
    assert!(report.steps.is_empty(), "{:?}", report.steps);
    assert_eq!(f.sim.call_count(), before);
}

#[test]
fn heap_round_trims_to_trim_threshold() {
    let f = fixture(ReservationPolicy::default(), true);
    let _held = fill(&f.alloc, 25 * 1024, 1024);
    f.alloc.run_round().unwrap();
    assert_eq!(f.alloc.diagnostics().top_free, 50 * MB);
    let burst = fill(&f.alloc, 10 * 1024, 1024);
    for p in burst.into_iter().rev() {
        f.alloc.deallocate(p).unwrap();
    }
    assert_eq!(f.alloc.diagnostics().top_free, 50 * MB);
    let report = f.alloc.run_round().unwrap();
    assert_eq!(f.alloc.policy().heap.trim_thr, 40 * MB);
    let shrinks: Vec<_> = report.calls(Component::Heap, Action::Shrink).collect();
    assert_eq!(shrinks.len(), 1);
    assert_eq!(shrinks[0].bytes, 10 * MB);
    assert_eq!(f.alloc.diagnostics().top_free, 40 * MB);
}

#[test]
fn mmap_round_delay_release() {
    let f = fixture(ReservationPolicy::default(), true);
    f.alloc.insert_reserved(pool_chunk(&f.sim, 524 * KB)).unwrap();
    let (p, path) = f.alloc.allocate_traced(278 * KB as usize).unwrap();
    assert_eq!(path, AllocPath::LargeLargest);
    unsafe { std::ptr::write_bytes(p.as_ptr(), 7, 524 * KB as usize) };
    assert_eq!(f.alloc.diagnostics().pending_shrink, 1);
    f.sim.set_record_events(true);
    let report = f.alloc.run_round().unwrap();
    let dr: Vec<_> = report.calls(Component::Mmap, Action::DelayRelease).collect();
    assert_eq!(dr.len(), 1);
    assert_eq!(dr[0].bytes, 244 * KB);
    assert_eq!(f.alloc.diagnostics().pending_shrink, 0);
    let events = f.sim.take_events();
    let i = events
        .iter()
        .position(|e| e.op == crate::backend::BackendOp::Resize)
        .unwrap();
    assert_eq!(events[i].bytes, 280 * KB);
    assert_eq!(events[i].available_after - events[i - 1].available_after, 244 * KB);
    let bytes = unsafe { std::slice::from_raw_parts(p.as_ptr(), 280 * KB as usize) };
    assert!(bytes.iter().all(|&b| b == 7));
    f.alloc.deallocate(p).unwrap();
}

#[test]
fn mmap_round_reserves_mean_sized_chunks() {
    let f = fixture(policy_with_min(MB), true);
    let _held: Vec<_> = (0..4)
        .map(|_| f.alloc.allocate(256 * KB as usize).unwrap())
        .collect();
    let report = f.alloc.run_round().unwrap();
    let pol = f.alloc.policy();
    assert_eq!(pol.mmap.tgt_mem, 2 * MB);
    assert_eq!(pol.mmap.mem_chunk, 256 * KB);
    let maps: Vec<_> = report.calls(Component::Mmap, Action::Map).collect();
    assert_eq!(maps.len(), 8);
    let d = f.alloc.diagnostics();
    assert_eq!(d.pool_occupancy[2], 8);
    assert_eq!(d.pool_total, 2 * MB);
    assert_eq!(f.sim.memory_stats().unwrap().pinned, d.pool_total + d.heap_pinned);
}

#[test]
fn mmap_round_unmaps_smallest_above_trim() {
    let f = fixture(policy_with_min(2 * MB), true);
    for _ in 0..20 {
        f.alloc.insert_reserved(pool_chunk(&f.sim, 256 * KB)).unwrap();
    }
    let report = f.alloc.run_round().unwrap();
    assert_eq!(f.alloc.policy().mmap.trim_thr, 4 * MB);
    assert_eq!(report.calls(Component::Mmap, Action::Unmap).count(), 4);
    assert_eq!(report.calls(Component::Mmap, Action::Map).count(), 0);
    assert_eq!(f.alloc.diagnostics().pool_total, 4 * MB);
}

#[test]
fn unregistering_tears_down_next_round() {
    let f = fixture(ReservationPolicy::default(), true);
    f.alloc.run_round().unwrap();
    let p = f.alloc.allocate(1024).unwrap();
    f.registered.store(false, Ordering::SeqCst);
    let report = f.alloc.run_round().unwrap();
    assert!(report.calls(Component::Heap, Action::Teardown).count() == 1);
    assert!(!f.alloc.is_managed());
    let d = f.alloc.diagnostics();
    assert_eq!(d.pool_total, 0);
    assert!(d.top_free < 4096);
    assert_eq!(f.sim.memory_stats().unwrap().pinned, 0);
    f.alloc.deallocate(p).unwrap();
    f.alloc.run_round().unwrap();
    assert_eq!(f.sim.app_resident(), 0);
    assert_eq!(f.alloc.diagnostics().heap_committed, 0);
}

#[test]
fn round_csv() {
    let f = fixture(policy_with_min(64 * KB), true);
    let report = f.alloc.run_round().unwrap();
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(ROUND_CSV_HEADER));
    let first = lines.next().unwrap();
    assert!(first.starts_with("1,heap,grow,4096,"), "{first}");
}

#[derive(Debug, Clone)]
enum Op {
    Alloc(usize),
    Free(usize),
    Round,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => prop_oneof![16usize..2048, 2048usize..128 * 1024, 128 * 1024usize..1024 * 1024].prop_map(Op::Alloc),
        4 => any::<usize>().prop_map(Op::Free),
        1 => Just(Op::Round),
    ]
}

fn check_bands(f: &Fixture) -> Result<(), TestCaseError> {
    let d = f.alloc.diagnostics();
    let p = &d.policy;
    prop_assert!(d.top_free >= p.heap.rsv_thr, "top {} < rsv {}", d.top_free, p.heap.rsv_thr);
    prop_assert!(d.top_free <= p.heap.trim_thr + p.heap.mem_chunk);
    prop_assert!(d.pool_total <= p.mmap.trim_thr);
    // pinned memory is exactly the reserve: top-chunk pages plus the pool
    prop_assert_eq!(f.sim.memory_stats().unwrap().pinned, d.heap_pinned + d.pool_total);
    prop_assert!(d.heap_pinned <= p.heap.trim_thr + p.heap.mem_chunk);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn randomized_alloc_free_rounds(ops in prop::collection::vec(op(), 1..300)) {
        let f = fixture(policy_with_min(512 * KB), true);
        let mut live: Vec<(NonNull<u8>, usize, u8)> = Vec::new();
        let mut tag = 0u8;
        for o in ops {
            match o {
                Op::Alloc(size) => {
                    let top = f.alloc.diagnostics().top_free;
                    let calls = f.sim.call_count();
                    let (p, path) = f.alloc.allocate_traced(size).unwrap();
                    if size < 128 * 1024 && top >= arena::round_size(size) as u64 {
                        prop_assert_eq!(f.sim.call_count(), calls);
                    }
                    if path.is_fast() && !path.is_large() {
                        prop_assert_eq!(f.sim.call_count(), calls);
                    }
                    if matches!(path, AllocPath::LargeBestFit | AllocPath::LargeLargest) {
                        // handoff unpin only
                        prop_assert!(f.sim.call_count() <= calls + 1);
                    }
                    tag = tag.wrapping_add(1);
                    unsafe { std::ptr::write_bytes(p.as_ptr(), tag, size) };
                    live.push((p, size, tag));
                }
                Op::Free(i) if !live.is_empty() => {
                    let (p, size, t) = live.swap_remove(i % live.len());
                    let bytes = unsafe { std::slice::from_raw_parts(p.as_ptr(), size) };
                    prop_assert!(bytes.iter().all(|&b| b == t));
                    f.alloc.deallocate(p).unwrap();
                }
                Op::Free(_) => {}
                Op::Round => {
                    f.alloc.run_round().unwrap();
                    check_bands(&f)?;
                    for (p, size, _) in &live {
                        let a = addr(*p);
                        let mut page = a / 4096 * 4096;
                        while page < a + size {
                            prop_assert!(!f.sim.page_state(page).1, "live page {page:#x} still pinned");
                            page += 4096;
                        }
                    }
                }
            }
            f.alloc.check_consistency().map_err(TestCaseError::fail)?;
        }
        let mut spans: Vec<(usize, usize)> = live.iter().map(|(p, s, _)| (addr(*p), *s)).collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            prop_assert!(w[0].0 + w[0].1 <= w[1].0);
        }
        for (p, size, t) in live.drain(..) {
            let bytes = unsafe { std::slice::from_raw_parts(p.as_ptr(), size) };
            prop_assert!(bytes.iter().all(|&b| b == t));
            f.alloc.deallocate(p).unwrap();
        }
        f.registered.store(false, Ordering::SeqCst);
        f.alloc.run_round().unwrap();
        f.alloc.run_round().unwrap();
        prop_assert_eq!(f.sim.live_bytes(), 0);
        prop_assert_eq!(f.sim.app_resident(), 0);
        prop_assert!(f.sim.conserved());
    }
}
