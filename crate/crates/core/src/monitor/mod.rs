//! Node-level monitor: a registry of latency-critical and batch processes,
//! plus a periodic pass that drops batch-job file cache largest file first
//! when memory usage crosses `adv_thr`.

pub mod reclaim;
pub mod registry;
pub mod scan;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use thiserror::Error;

pub use reclaim::{reclaim_pass, Advisory, ReclaimConfig, ADVISORY_CSV_HEADER};
pub use registry::{FileProbe, RegistryFile, ServiceKind, ServiceRegistry};
pub use scan::{scan_batch_files, BatchFileEntry, FileSource, ProcSource, ScanResult, SimManifest};

use crate::backend::{Backend, BackendError};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("pid {pid} is already registered under the other kind (wanted {kind})")]
    Conflict { pid: u32, kind: ServiceKind },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// The daemon state shared by the control socket and the reclaim loop.
pub struct Daemon {
    registry: Mutex<ServiceRegistry>,
    file: Option<RegistryFile>,
    backend: Arc<dyn Backend>,
    source: Box<dyn FileSource>,
    config: ReclaimConfig,
    advisory_log: Mutex<Option<File>>,
    advisories: AtomicU64,
    passes: AtomicU64,
}

impl Daemon {
    /// Builds a daemon. With a registry file, existing contents are loaded
    /// and every change is written back.
    pub fn new(
        backend: Arc<dyn Backend>,
        source: Box<dyn FileSource>,
        config: ReclaimConfig,
        registry_file: Option<RegistryFile>,
    ) -> Result<Self, MonitorError> {
        config.validate()?;
        let registry = match &registry_file {
            Some(f) => f.load()?,
            None => ServiceRegistry::new(),
        };
        Ok(Daemon {
            registry: Mutex::new(registry),
            file: registry_file,
            backend,
            source,
            config,
            advisory_log: Mutex::new(None),
            advisories: AtomicU64::new(0),
            passes: AtomicU64::new(0),
        })
    }

    /// Appends every advisory to a CSV file, writing the header if the file
    /// is new or empty.
    pub fn log_advisories_to(&self, path: &Path) -> Result<(), MonitorError> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if f.metadata()?.len() == 0 {
            writeln!(f, "{ADVISORY_CSV_HEADER}")?;
        }
        *lock(&self.advisory_log) = Some(f);
        Ok(())
    }

    pub fn config(&self) -> &ReclaimConfig {
        &self.config
    }

    pub fn registry(&self) -> ServiceRegistry {
        lock(&self.registry).clone()
    }

    fn update<R>(&self, f: impl FnOnce(&mut ServiceRegistry) -> Result<R, MonitorError>) -> Result<R, MonitorError> {
        let mut reg = lock(&self.registry);
        let mut next = reg.clone();
        let out = f(&mut next)?;
        if let Some(file) = &self.file {
            file.store(&next)?;
        }
        *reg = next;
        Ok(out)
    }

    pub fn register(&self, pid: u32, kind: ServiceKind) -> Result<(), MonitorError> {
        self.update(|r| r.register(pid, kind))
    }

    pub fn unregister(&self, pid: u32) -> Result<bool, MonitorError> {
        self.update(|r| Ok(r.unregister(pid)))
    }

    /// Handles one control line and returns the reply line.
    pub fn handle_command(&self, line: &str) -> String {
        let mut parts = line.split_whitespace();
        let cmd = parts.next().unwrap_or("");
        let arg = parts.next();
        let extra = parts.next();
        let pid = || -> Result<u32, String> {
            match (arg, extra) {
                (Some(p), None) => p.parse().map_err(|_| format!("bad pid {p:?}")),
                _ => Err(format!("{cmd} takes exactly one pid")),
            }
        };
        let res = match cmd {
            "REG-LC" | "REG-BATCH" => pid().and_then(|p| {
                let kind = if cmd == "REG-LC" {
                    ServiceKind::LatencyCritical
                } else {
                    ServiceKind::Batch
                };
                self.register(p, kind).map(|_| "OK".to_string()).map_err(|e| e.to_string())
            }),
            "UNREG" => pid().and_then(|p| match self.unregister(p) {
                Ok(true) => Ok("OK".into()),
                Ok(false) => Ok("OK not-registered".into()),
                Err(e) => Err(e.to_string()),
            }),
            "STAT" if arg.is_none() => Ok(self.stat_line()),
            _ => Err(format!("unknown command {line:?}")),
        };
        match res {
            Ok(s) => s,
            Err(e) => format!("ERR {e}"),
        }
    }

    fn stat_line(&self) -> String {
        let reg = self.registry();
        let mut out = format!(
            "lc={} batch={} passes={} advisories={}",
            reg.latency_critical().count(),
            reg.batch().count(),
            self.passes.load(Ordering::Relaxed),
            self.advisories.load(Ordering::Relaxed),
        );
        match self.backend.memory_stats() {
            Ok(s) => out.push_str(&format!(
                " usage={:.4} total={} available={} file_cache={}",
                s.usage(),
                s.total,
                s.available,
                s.file_cache
            )),
            Err(e) => out.push_str(&format!(" stats-error={e}")),
        }
        out
    }

    /// One scan plus reclaim pass. Batch pids that have exited are dropped
    /// from the registry.
    pub fn poll_once(&self) -> Result<Vec<Advisory>, MonitorError> {
        let reg = self.registry();
        let scan = scan_batch_files(&reg, self.source.as_ref())?;
        if !scan.exited.is_empty() {
            self.update(|r| {
                for pid in &scan.exited {
                    r.unregister(*pid);
                }
                Ok(())
            })?;
        }
        let stats = self.backend.memory_stats()?;
        let reg = self.registry();
        let adv = reclaim_pass(self.backend.as_ref(), stats, &scan.entries, &reg, &self.config);
        self.passes.fetch_add(1, Ordering::Relaxed);
        self.advisories.fetch_add(adv.len() as u64, Ordering::Relaxed);
        if let Some(f) = lock(&self.advisory_log).as_mut() {
            for a in &adv {
                writeln!(f, "{}", a.csv_line())?;
            }
            f.flush()?;
        }
        for a in &adv {
            log::info!(
                "dropped cache of {} ({} bytes), usage {:.3} -> {:.3}",
                a.file.display(),
                a.released,
                a.usage_before,
                a.usage_after
            );
        }
        Ok(adv)
    }

    fn serve_client(&self, stream: UnixStream) -> std::io::Result<()> {
        let mut out = stream.try_clone()?;
        for line in BufReader::new(stream).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            writeln!(out, "{}", self.handle_command(line.trim()))?;
        }
        Ok(())
    }

    /// Accepts control connections until `stop` is set. Each connection is
    /// served on its own thread.
    pub fn serve(self: &Arc<Self>, listener: UnixListener, stop: Arc<AtomicBool>) -> std::io::Result<()> {
        listener.set_nonblocking(true)?;
        while !stop.load(Ordering::Acquire) {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let me = Arc::clone(self);
                    std::thread::spawn(move || {
                        if let Err(e) = me.serve_client(stream) {
                            log::debug!("control client: {e}");
                        }
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(std::time::Duration::from_millis(10));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Runs reclaim passes every poll period until `stop` is set, or for
    /// `max_passes` passes when given.
    pub fn run_poll_loop(&self, stop: &AtomicBool, max_passes: Option<u64>) -> Result<(), MonitorError> {
        let mut next = Instant::now();
        let mut done = 0;
        while !stop.load(Ordering::Acquire) {
            if let Err(e) = self.poll_once() {
                log::warn!("reclaim pass failed: {e}");
            }
            done += 1;
            if max_passes.is_some_and(|m| done >= m) {
                break;
            }
            next += self.config.poll_period;
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            } else {
                next = now;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SimBackend, SimConfig};
    use crate::config::GB;
    use std::io::{BufRead, BufReader};

    fn daemon(manifest: &str, file: Option<RegistryFile>) -> (Arc<SimBackend>, Arc<Daemon>) {
        let sim = Arc::new(SimBackend::new(SimConfig::with_capacity(100 * GB)).unwrap());
        let m = SimManifest::parse(manifest).unwrap();
        for e in &m.entries {
            sim.load_file(e.file.clone(), e.cached).unwrap();
        }
        let backend: Arc<dyn Backend> = sim.clone();
        let d = Daemon::new(backend, Box::new(m), ReclaimConfig::default(), file).unwrap();
        (sim, Arc::new(d))
    }

    #[test]
    fn commands() {
        let (_, d) = daemon("", None);
        assert_eq!(d.handle_command("REG-LC 42"), "OK");
        assert_eq!(d.handle_command("REG-LC 42"), "OK");
        assert!(d.handle_command("REG-BATCH 42").starts_with("ERR"));
        assert_eq!(d.handle_command("REG-BATCH 7"), "OK");
        assert!(d.handle_command("STAT").starts_with("lc=1 batch=1 "));
        assert_eq!(d.handle_command("UNREG 42"), "OK");
        assert_eq!(d.handle_command("UNREG 42"), "OK not-registered");
        assert!(d.handle_command("REG-LC").starts_with("ERR"));
        assert!(d.handle_command("REG-LC x").starts_with("ERR"));
        assert!(d.handle_command("NOPE").starts_with("ERR"));
    }

    #[test]
    fn registry_persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg");
        let (_, d) = daemon("", Some(RegistryFile::new(&path)));
        d.handle_command("REG-LC 5");
        d.handle_command("REG-BATCH 6");
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "5 LC\n6 BATCH\n");
        assert!(crate::alloc::RegistryProbe::is_registered(&FileProbe::new(&path), 5));
        let (_, d2) = daemon("", Some(RegistryFile::new(&path)));
        assert_eq!(d2.registry(), d.registry());
    }

    #[test]
    fn poll_prunes_and_reclaims() {
        let (sim, d) = daemon("10 /a 6GB\n10 /b 4GB\n", None);
        sim.add_pressure(85 * GB).unwrap();
        d.register(10, ServiceKind::Batch).unwrap();
        d.register(11, ServiceKind::Batch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("adv.csv");
        d.log_advisories_to(&log).unwrap();
        let adv = d.poll_once().unwrap();
        assert_eq!(adv.len(), 1);
        assert_eq!(d.registry().kind(11), None);
        let text = std::fs::read_to_string(&log).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(ADVISORY_CSV_HEADER));
        assert!(lines.next().unwrap().contains(",/a,6442450944,0.95"));
        assert!(d.poll_once().unwrap().is_empty());
    }

    #[test]
    fn socket_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sock = dir.path().join("ctl.sock");
        let (_, d) = daemon("", None);
        let listener = UnixListener::bind(&sock).unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let server = {
            let d = Arc::clone(&d);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || d.serve(listener, stop))
        };
        let mut s = UnixStream::connect(&sock).unwrap();
        let mut r = BufReader::new(s.try_clone().unwrap());
        let mut reply = String::new();
        for (cmd, want) in [("REG-LC 9", "OK"), ("REG-BATCH 9", "ERR"), ("STAT", "lc=1")] {
            writeln!(s, "{cmd}").unwrap();
            reply.clear();
            r.read_line(&mut reply).unwrap();
            assert!(reply.starts_with(want), "{cmd}: {reply}");
        }
        stop.store(true, Ordering::Release);
        server.join().unwrap().unwrap();
    }
}
