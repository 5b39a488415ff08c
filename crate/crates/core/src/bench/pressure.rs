use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::{parse_size_arg, BenchError};
use crate::backend::{Backend, ChunkHandle, OsBackend, PressureId, SimBackend};
use crate::config::MB;

/// Allocation step of the real pressure generators; stats are re-read
/// after every step.
pub const PRESSURE_STEP: u64 = 64 * MB;

const HOLD_POLL: Duration = Duration::from_millis(50);
const REREAD_EVERY: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PressureSpec {
    None,
    /// Anonymous memory until available drops to `target_free`.
    Anon { target_free: u64 },
    /// `file_bytes` of page cache, then anonymous filler to `target_free`.
    File { file_bytes: u64, target_free: u64 },
}

impl std::str::FromStr for PressureSpec {
    type Err = BenchError;

    /// `none`, `anon:<free>` or `file:<bytes>,<free>`.
    fn from_str(s: &str) -> Result<Self, BenchError> {
        let bad = || BenchError::InvalidArgument(format!("pressure `{s}`: expected anon:<free> or file:<bytes>,<free>"));
        if s == "none" {
            return Ok(PressureSpec::None);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "anon" => Ok(PressureSpec::Anon {
                target_free: parse_size_arg(rest)?,
            }),
            "file" => {
                let (bytes, free) = rest.split_once(',').ok_or_else(bad)?;
                Ok(PressureSpec::File {
                    file_bytes: parse_size_arg(bytes)?,
                    target_free: parse_size_arg(free)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Where pressure is applied.
#[derive(Clone)]
pub enum PressureNode {
    Sim(Arc<SimBackend>),
    /// The host; scratch files for file pressure go under `scratch_dir`.
    Real { scratch_dir: PathBuf },
}

impl PressureSpec {
    pub fn apply(&self, node: &PressureNode) -> Result<Option<PressureHandle>, BenchError> {
        match *self {
            PressureSpec::None => Ok(None),
            PressureSpec::Anon { target_free } => gen_anon_pressure(node, target_free).map(Some),
            PressureSpec::File {
                file_bytes,
                target_free,
            } => gen_file_pressure(node, file_bytes, target_free).map(Some),
        }
    }
}

/// Active pressure. Released explicitly or on drop.
pub struct PressureHandle {
    inner: Option<Inner>,
}

enum Inner {
    Sim {
        backend: Arc<SimBackend>,
        ids: Vec<PressureId>,
        file: Option<PathBuf>,
    },
    Real {
        stop: Arc<AtomicBool>,
        worker: JoinHandle<()>,
        file: Option<PathBuf>,
    },
}

impl PressureHandle {
    pub fn release(mut self) {
        self.release_inner();
    }

    fn release_inner(&mut self) {
        match self.inner.take() {
            Some(Inner::Sim { backend, ids, file }) => {
                for id in ids {
                    backend.release_pressure(id);
                }
                if let Some(f) = file {
                    let _ = backend.advise_release_file_cache(&f, u64::MAX);
                }
            }
            Some(Inner::Real { stop, worker, file }) => {
                stop.store(true, Ordering::Release);
                let _ = worker.join();
                if let Some(f) = file {
                    let backend = OsBackend::new();
                    let _ = backend.advise_release_file_cache(&f, u64::MAX);
                    let _ = fs::remove_file(&f);
                }
            }
            None => {}
        }
    }
}

impl Drop for PressureHandle {
    fn drop(&mut self) {
        self.release_inner();
    }
}

/// Holds anonymous memory until available memory is at `target_free`.
pub fn gen_anon_pressure(node: &PressureNode, target_free: u64) -> Result<PressureHandle, BenchError> {
    gen_file_pressure(node, 0, target_free)
}

/// Loads `file_bytes` into the page cache and fills the rest of memory
/// with anonymous pages down to `target_free` available.
pub fn gen_file_pressure(node: &PressureNode, file_bytes: u64, target_free: u64) -> Result<PressureHandle, BenchError> {
    match node {
        PressureNode::Sim(sim) => sim_pressure(sim, file_bytes, target_free),
        PressureNode::Real { scratch_dir } => real_pressure(scratch_dir, file_bytes, target_free),
    }
}

fn sim_pressure(sim: &Arc<SimBackend>, file_bytes: u64, target_free: u64) -> Result<PressureHandle, BenchError> {
    let mut handle = PressureHandle {
        inner: Some(Inner::Sim {
            backend: Arc::clone(sim),
            ids: Vec::new(),
            file: None,
        }),
    };
    let Some(Inner::Sim { ids, file, .. }) = handle.inner.as_mut() else {
        unreachable!()
    };
    if file_bytes > 0 {
        let path = PathBuf::from("/scratch/pressure-file");
        sim.load_file(&path, file_bytes)?;
        *file = Some(path);
    }
    let available = sim.memory_stats()?.available;
    if available > target_free {
        ids.push(sim.add_pressure(available - target_free)?);
    }
    Ok(handle)
}

/// Bytes the current cgroup may still charge, when a limit is set.
fn cgroup_headroom() -> Option<u64> {
    let max = fs::read_to_string("/sys/fs/cgroup/memory.max").ok()?;
    let max: u64 = max.trim().parse().ok()?;
    let current: u64 = fs::read_to_string("/sys/fs/cgroup/memory.current").ok()?.trim().parse().ok()?;
    Some(max.saturating_sub(current))
}

fn disk_free(dir: &std::path::Path) -> Option<u64> {
    use std::os::unix::ffi::OsStrExt;
    let c = std::ffi::CString::new(dir.as_os_str().as_bytes()).ok()?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `st` is writable.
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut st) };
    (rc == 0).then(|| st.f_bavail as u64 * st.f_frsize as u64)
}

/// Pins the calling thread to `cpu`. Returns false when the OS refuses.
pub(crate) fn pin_current_thread(cpu: usize) -> bool {
    // SAFETY: cpu_set_t is plain data; sched_setaffinity only reads it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

pub(crate) fn cpu_count() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn write_scratch(path: &std::path::Path, bytes: u64) -> Result<(), BenchError> {
    let mut f = File::create(path)?;
    let block = vec![0x5au8; PRESSURE_STEP as usize];
    let mut left = bytes;
    while left > 0 {
        let n = left.min(PRESSURE_STEP) as usize;
        f.write_all(&block[..n])?;
        left -= n as u64;
    }
    f.sync_all()?;
    Ok(())
}

fn read_through(path: &std::path::Path) -> std::io::Result<()> {
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 1 << 20];
    while f.read(&mut buf)? > 0 {}
    Ok(())
}

fn real_pressure(scratch_dir: &std::path::Path, file_bytes: u64, target_free: u64) -> Result<PressureHandle, BenchError> {
    let os = OsBackend::new();
    let available = os.memory_stats()?.available;
    let want = available.saturating_sub(target_free);
    if let Some(headroom) = cgroup_headroom() {
        if want > headroom {
            return Err(BenchError::Pressure(format!(
                "need {want} bytes of anonymous memory to reach {target_free} available, \
                 but the cgroup limit leaves {headroom}; the generator would be OOM-killed"
            )));
        }
    }
    let file = if file_bytes > 0 {
        if disk_free(scratch_dir).is_some_and(|free| free < file_bytes) {
            return Err(BenchError::Pressure(format!(
                "not enough disk under {} for {file_bytes} bytes of scratch files",
                scratch_dir.display()
            )));
        }
        let path = scratch_dir.join(format!("pressure-{}.dat", std::process::id()));
        write_scratch(&path, file_bytes)?;
        read_through(&path)?;
        Some(path)
    } else {
        None
    };

    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Result<(), String>>();
    let worker = {
        let stop = Arc::clone(&stop);
        let file = file.clone();
        std::thread::Builder::new()
            .name("pressure".into())
            .spawn(move || anon_filler(os, target_free, file, stop, tx))?
    };
    let handle = PressureHandle {
        inner: Some(Inner::Real { stop, worker, file }),
    };
    match rx.recv() {
        Ok(Ok(())) => Ok(handle),
        Ok(Err(msg)) => Err(BenchError::Pressure(msg)),
        Err(_) => Err(BenchError::Pressure("pressure generator exited".into())),
    }
}

/// Maps and touches 64 MB steps until available memory reaches the target,
/// reports, then keeps topping up (and re-reading the scratch file) until
/// stopped.
fn anon_filler(
    os: OsBackend,
    target_free: u64,
    file: Option<PathBuf>,
    stop: Arc<AtomicBool>,
    ready: mpsc::Sender<Result<(), String>>,
) {
    let cpus = cpu_count();
    if cpus > 1 {
        pin_current_thread(cpus - 1);
    }
    let mut held: Vec<ChunkHandle> = Vec::new();
    let mut reported = false;
    let mut stalled = 0;
    let mut since_reread = Duration::ZERO;
    while !stop.load(Ordering::Acquire) {
        let available = match os.memory_stats() {
            Ok(s) => s.available,
            Err(e) => {
                let _ = ready.send(Err(e.to_string()));
                break;
            }
        };
        let excess = available.saturating_sub(target_free);
        if excess >= os.page_size() as u64 {
            let step = excess.min(PRESSURE_STEP) as usize / os.page_size() * os.page_size();
            match os.map_chunk(step).and_then(|c| os.touch(c.range()).map(|_| c)) {
                Ok(c) => held.push(c),
                Err(e) => {
                    if !reported {
                        let _ = ready.send(Err(format!("allocation failed before reaching target: {e}")));
                    }
                    break;
                }
            }
            let after = os.memory_stats().map(|s| s.available).unwrap_or(available);
            stalled = if after + (step as u64) / 2 > available { stalled + 1 } else { 0 };
            if stalled >= 16 && !reported {
                let _ = ready.send(Err(
                    "available memory does not drop while allocating (swap or overcommit)".into(),
                ));
                break;
            }
            continue;
        }
        if !reported {
            reported = true;
            let _ = ready.send(Ok(()));
        }
        std::thread::sleep(HOLD_POLL);
        since_reread += HOLD_POLL;
        if let Some(f) = &file {
            if since_reread >= REREAD_EVERY {
                since_reread = Duration::ZERO;
                let _ = read_through(f);
            }
        }
    }
    for c in held {
        let _ = os.unmap_chunk(c);
    }
}
