use std::path::PathBuf;
use std::ptr::NonNull;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::pressure::{cpu_count, pin_current_thread, PressureNode, PressureSpec};
use super::report::{compare, summarize, ComparisonRow, Summary, DEFAULT_PERCENTILES};
use super::{BackendKind, BenchError, LatencySeries, Mode, WorkloadSpec};
use crate::alloc::{Action, Allocator, ManagementRound, ReservationPolicy, Thresholds};
use crate::backend::{Backend, ChunkHandle, OsBackend, SimBackend, SimConfig};
use crate::config::GB;

/// Everything a run needs besides the workload itself.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub policy: ReservationPolicy,
    /// Simulated node; ignored on the real backend.
    pub sim: SimConfig,
    pub pressure: PressureSpec,
    /// Directory for file-pressure scratch files on the real backend.
    pub scratch_dir: PathBuf,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            policy: ReservationPolicy::default(),
            sim: SimConfig::with_capacity(GB),
            pressure: PressureSpec::None,
            scratch_dir: std::env::temp_dir(),
        }
    }
}

/// State at the end of one management round of a simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSample {
    pub round: u64,
    /// Simulated time at which the round finished, in microseconds.
    pub at_us: f64,
    /// Free top-chunk bytes when the round started.
    pub top_free_before: u64,
    /// Bytes added to the top chunk by the round's growth steps.
    pub heap_grown: u64,
    pub top_free: u64,
    pub pool_total: u64,
    pub heap: Thresholds,
    pub mmap: Thresholds,
    /// Bytes the driver requested in the interval the round's thresholds
    /// were computed from.
    pub small_demand: u64,
    pub large_demand: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub series: LatencySeries,
    /// Round trace; empty on the real backend and in baseline mode.
    pub rounds: Vec<RoundSample>,
    /// Total time the application spent waiting for the arena lock.
    pub lock_wait_us: f64,
}

fn policy_for(spec: &WorkloadSpec, opts: &RunOptions) -> Result<ReservationPolicy, BenchError> {
    let mut policy = opts.policy.clone();
    if let Some(f) = spec.rsv_factor {
        policy.rsv_factor = f;
    }
    policy.validate()?;
    Ok(policy)
}

/// Runs the fixed-size fill workload: `ceil(total / size)` requests, one at
/// a time, each sample covering the allocate call and the first write to
/// every page of the block. Blocks are kept until the run ends unless
/// `spec.churn` is set. An allocation failure stops the run and flags the
/// partial series as aborted.
pub fn run_micro(spec: &WorkloadSpec, opts: &RunOptions) -> Result<RunOutcome, BenchError> {
    spec.validate()?;
    let policy = policy_for(spec, opts)?;
    let mut out = match spec.backend {
        BackendKind::Sim => run_sim(spec, policy, opts)?,
        BackendKind::Real => run_real(spec, policy, opts)?,
    };
    out.series.spec = Some(spec.clone());
    Ok(out)
}

fn us(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1000.0
}

/// Demand counters shared between the simulated application and the
/// management actor.
#[derive(Default)]
struct Demand {
    small: u64,
    large: u64,
}

/// The management thread of a simulated run. Rounds start on interval
/// ticks; a round that overruns starts the next one right away. Arena-lock
/// steps block the application until they end. Chunks reserved for the
/// pool become visible when their step ends.
struct ManagementActor {
    interval_us: f64,
    t: f64,
    next_tick: f64,
    round: Option<ManagementRound>,
    fresh_round: bool,
    round_demand: (u64, u64),
    top_free_before: u64,
    grown: u64,
    pending: Vec<(ChunkHandle, f64)>,
    heap_busy_until: f64,
}

impl ManagementActor {
    fn new(interval: Duration) -> Self {
        ManagementActor {
            interval_us: us(interval),
            t: 0.0,
            next_tick: 0.0,
            round: None,
            fresh_round: false,
            round_demand: (0, 0),
            top_free_before: 0,
            grown: 0,
            pending: Vec::new(),
            heap_busy_until: 0.0,
        }
    }

    fn commit(&mut self, alloc: &Allocator, upto: f64) -> Result<(), BenchError> {
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].1 <= upto {
                let (c, _) = self.pending.swap_remove(i);
                alloc.insert_reserved(c)?;
            } else {
                i += 1;
            }
        }
        Ok(())
    }

    /// Runs every management step that starts at or before `arrival`.
    fn run_until(
        &mut self,
        arrival: f64,
        alloc: &Allocator,
        sim: &SimBackend,
        app_lock_release: f64,
        demand: &mut Demand,
        rounds: &mut Vec<RoundSample>,
    ) -> Result<(), BenchError> {
        loop {
            self.commit(alloc, arrival)?;
            if self.round.is_none() {
                let start = self.t.max(self.next_tick);
                if start > arrival {
                    return Ok(());
                }
                self.t = start;
                self.round = Some(alloc.begin_round());
                self.fresh_round = true;
            }
            if self.t > arrival {
                return Ok(());
            }
            self.commit(alloc, f64::INFINITY)?;
            if self.fresh_round {
                self.fresh_round = false;
                self.round_demand = (std::mem::take(&mut demand.small), std::mem::take(&mut demand.large));
                self.top_free_before = alloc.diagnostics().top_free;
                self.grown = 0;
            }
            let round = self.round.as_mut().expect("round in progress");
            let c0 = sim.clock();
            let step = alloc.step_round(round, true)?;
            let dur = us(sim.clock() - c0);
            match step {
                Some(rep) => {
                    let start = if rep.heap_lock { self.t.max(app_lock_release) } else { self.t };
                    let end = start + dur;
                    if rep.heap_lock {
                        self.heap_busy_until = end;
                    }
                    self.t = end;
                    if rep.action == Action::Grow {
                        self.grown += rep.bytes;
                    }
                    if let Some(c) = rep.pending {
                        self.pending.push((c, end));
                    }
                }
                None => {
                    let number = round.number();
                    self.round = None;
                    self.next_tick += self.interval_us;
                    if self.next_tick < self.t {
                        self.next_tick = self.t;
                    }
                    let d = alloc.diagnostics();
                    rounds.push(RoundSample {
                        round: number,
                        at_us: self.t,
                        top_free_before: self.top_free_before,
                        heap_grown: self.grown,
                        top_free: d.top_free,
                        pool_total: d.pool_total,
                        heap: d.policy.heap,
                        mmap: d.policy.mmap,
                        small_demand: self.round_demand.0,
                        large_demand: self.round_demand.1,
                    });
                }
            }
        }
    }
}

fn run_sim(spec: &WorkloadSpec, policy: ReservationPolicy, opts: &RunOptions) -> Result<RunOutcome, BenchError> {
    let mut cfg = opts.sim.clone();
    cfg.record_events = false;
    let sim = Arc::new(SimBackend::new(cfg)?);
    let _pressure = opts.pressure.apply(&PressureNode::Sim(Arc::clone(&sim)))?;
    let registered = spec.mode == Mode::Hermes;
    let backend: Arc<dyn Backend> = sim.clone();
    let probe = Arc::new(move |_pid: u32| registered);
    let alloc = Allocator::manual(policy.clone(), backend, probe, 1)?;

    let size = spec.request_size as usize;
    let large = policy.is_large(spec.request_size);
    let n = spec.request_count();
    let mut samples = Vec::with_capacity(n as usize);
    let mut rounds = Vec::new();
    let mut actor = ManagementActor::new(policy.interval);
    let mut demand = Demand::default();
    let mut app_t = 0.0f64;
    let mut app_lock_release = 0.0f64;
    let mut lock_wait = 0.0;
    let mut previous: Option<NonNull<u8>> = None;
    let mut aborted = None;

    for seq in 0..n {
        let arrival = app_t;
        if registered {
            actor.run_until(arrival, &alloc, &sim, app_lock_release, &mut demand, &mut rounds)?;
        }
        let wait = if large { 0.0 } else { (actor.heap_busy_until - arrival).max(0.0) };
        let c0 = sim.clock();
        let ptr = match alloc.allocate(size) {
            Ok(p) => p,
            Err(e) => {
                aborted = Some(format!("request {seq}: {e}"));
                break;
            }
        };
        let c1 = sim.clock();
        let start = ptr.as_ptr() as usize;
        if let Err(e) = sim.touch(start..start + size) {
            aborted = Some(format!("request {seq}: {e}"));
            break;
        }
        let c2 = sim.clock();
        app_lock_release = arrival + wait + us(c1 - c0);
        let latency = wait + us(c2 - c0);
        lock_wait += wait;
        samples.push((seq, latency));
        if large {
            demand.large += spec.request_size;
        } else {
            demand.small += spec.request_size;
        }
        app_t = arrival + latency + spec.gap_us;
        if spec.churn {
            match previous.take() {
                Some(p) => alloc.deallocate(p)?,
                None => previous = Some(ptr),
            }
        }
    }
    actor.commit(&alloc, f64::INFINITY)?;
    drop(alloc);
    Ok(RunOutcome {
        series: LatencySeries {
            samples,
            spec: None,
            aborted,
            timer_overhead_us: None,
        },
        rounds,
        lock_wait_us: lock_wait,
    })
}

/// Cost of one pair of monotonic clock reads, averaged.
fn timer_overhead() -> Duration {
    const N: u32 = 10_000;
    let t = Instant::now();
    for _ in 0..N {
        std::hint::black_box(Instant::now().elapsed());
    }
    t.elapsed() / N
}

/// Restores the calling thread's CPU mask on drop.
struct AffinityGuard(Option<libc::cpu_set_t>);

impl AffinityGuard {
    fn pin_to(cpu: usize) -> Self {
        // SAFETY: cpu_set_t is plain data filled in by the kernel.
        let saved = unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            (libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) == 0).then_some(set)
        };
        if saved.is_some() && pin_current_thread(cpu) {
            AffinityGuard(saved)
        } else {
            AffinityGuard(None)
        }
    }
}

impl Drop for AffinityGuard {
    fn drop(&mut self) {
        if let Some(set) = self.0.take() {
            // SAFETY: `set` was returned by sched_getaffinity.
            unsafe {
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
            }
        }
    }
}

fn run_real(spec: &WorkloadSpec, policy: ReservationPolicy, opts: &RunOptions) -> Result<RunOutcome, BenchError> {
    let _pressure = opts.pressure.apply(&PressureNode::Real {
        scratch_dir: opts.scratch_dir.clone(),
    })?;
    let _pin = (cpu_count() > 1).then(|| AffinityGuard::pin_to(0));
    let backend: Arc<dyn Backend> = Arc::new(OsBackend::new());
    let page = backend.page_size();
    let registered = spec.mode == Mode::Hermes;
    let probe = Arc::new(move |_pid: u32| registered);
    let alloc = Allocator::activate(policy, backend, probe)?;
    let overhead = timer_overhead();

    let size = spec.request_size as usize;
    let n = spec.request_count();
    let mut samples = Vec::with_capacity(n as usize);
    let mut previous: Option<NonNull<u8>> = None;
    let mut aborted = None;
    let gap = Duration::from_nanos((spec.gap_us * 1000.0) as u64);
    for seq in 0..n {
        let t0 = Instant::now();
        let ptr = match alloc.allocate(size) {
            Ok(p) => p,
            Err(e) => {
                aborted = Some(format!("request {seq}: {e}"));
                break;
            }
        };
        let base = ptr.as_ptr();
        // SAFETY: the block spans `size` writable bytes.
        unsafe {
            let mut off = 0;
            while off < size {
                base.add(off).write_volatile(1);
                off += page;
            }
            base.add(size - 1).write_volatile(1);
        }
        let elapsed = t0.elapsed();
        samples.push((seq, us(elapsed)));
        if spec.churn {
            match previous.take() {
                Some(p) => alloc.deallocate(p)?,
                None => previous = Some(ptr),
            }
        }
        if !gap.is_zero() {
            let until = Instant::now() + gap;
            while Instant::now() < until {
                std::hint::spin_loop();
            }
        }
    }
    drop(alloc);
    Ok(RunOutcome {
        series: LatencySeries {
            samples,
            spec: None,
            aborted,
            timer_overhead_us: Some(us(overhead)),
        },
        rounds: Vec::new(),
        lock_wait_us: 0.0,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub factor: f64,
    pub summary: Summary,
    /// Reductions against the baseline run, mean first.
    pub reductions: Vec<ComparisonRow>,
}

impl SweepRow {
    pub fn reduction(&self, label: &str) -> Option<f64> {
        self.reductions.iter().find(|r| r.label == label).map(|r| r.reduction_pct)
    }
}

/// Runs the workload once in baseline mode, then in managed mode for each
/// reservation factor, and reports reductions against the baseline.
pub fn sweep_rsv_factor(
    values: &[f64],
    spec: &WorkloadSpec,
    opts: &RunOptions,
) -> Result<(Summary, Vec<SweepRow>), BenchError> {
    if values.is_empty() {
        return Err(BenchError::InvalidArgument("no reservation factors given".into()));
    }
    let completed = |out: RunOutcome| -> Result<LatencySeries, BenchError> {
        match out.series.aborted {
            Some(msg) => Err(BenchError::InvalidArgument(format!("run aborted: {msg}"))),
            None => Ok(out.series),
        }
    };
    let base_spec = WorkloadSpec {
        mode: Mode::Baseline,
        rsv_factor: None,
        ..spec.clone()
    };
    let baseline = summarize(&completed(run_micro(&base_spec, opts)?)?, &DEFAULT_PERCENTILES)?;
    let mut rows = Vec::with_capacity(values.len());
    for &factor in values {
        let s = WorkloadSpec {
            mode: Mode::Hermes,
            rsv_factor: Some(factor),
            ..spec.clone()
        };
        let summary = summarize(&completed(run_micro(&s, opts)?)?, &DEFAULT_PERCENTILES)?;
        rows.push(SweepRow {
            factor,
            reductions: compare(&baseline, &summary),
            summary,
        });
    }
    Ok((baseline, rows))
}
