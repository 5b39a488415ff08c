use std::collections::BTreeSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::MonitorError;
use crate::alloc::RegistryProbe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServiceKind {
    LatencyCritical,
    Batch,
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceKind::LatencyCritical => "LC",
            ServiceKind::Batch => "BATCH",
        })
    }
}

impl FromStr for ServiceKind {
    type Err = MonitorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LC" => Ok(ServiceKind::LatencyCritical),
            "BATCH" => Ok(ServiceKind::Batch),
            other => Err(MonitorError::Parse(format!("unknown service kind {other:?}"))),
        }
    }
}

/// Latency-critical and batch pids. The two sets never share a pid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServiceRegistry {
    latency_critical: BTreeSet<u32>,
    batch: BTreeSet<u32>,
}

impl ServiceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `pid` to the set for `kind`. Re-registering with the same kind
    /// is a no-op; registering under the other kind is rejected.
    pub fn register(&mut self, pid: u32, kind: ServiceKind) -> Result<(), MonitorError> {
        let (own, other) = match kind {
            ServiceKind::LatencyCritical => (&mut self.latency_critical, &self.batch),
            ServiceKind::Batch => (&mut self.batch, &self.latency_critical),
        };
        if other.contains(&pid) {
            return Err(MonitorError::Conflict { pid, kind });
        }
        own.insert(pid);
        Ok(())
    }

    /// Returns whether the pid was present.
    pub fn unregister(&mut self, pid: u32) -> bool {
        self.latency_critical.remove(&pid) | self.batch.remove(&pid)
    }

    /// Whether `pid` is registered as latency-critical.
    pub fn is_registered(&self, pid: u32) -> bool {
        self.latency_critical.contains(&pid)
    }

    pub fn kind(&self, pid: u32) -> Option<ServiceKind> {
        if self.latency_critical.contains(&pid) {
            Some(ServiceKind::LatencyCritical)
        } else if self.batch.contains(&pid) {
            Some(ServiceKind::Batch)
        } else {
            None
        }
    }

    pub fn latency_critical(&self) -> impl Iterator<Item = u32> + '_ {
        self.latency_critical.iter().copied()
    }

    pub fn batch(&self) -> impl Iterator<Item = u32> + '_ {
        self.batch.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.latency_critical.is_empty() && self.batch.is_empty()
    }

    /// One `<pid> <LC|BATCH>` line per pid.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for pid in &self.latency_critical {
            out.push_str(&format!("{pid} LC\n"));
        }
        for pid in &self.batch {
            out.push_str(&format!("{pid} BATCH\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, MonitorError> {
        let mut reg = ServiceRegistry::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(pid), Some(kind), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(MonitorError::Parse(format!("line {}: expected `<pid> <LC|BATCH>`", i + 1)));
            };
            let pid = pid
                .parse()
                .map_err(|_| MonitorError::Parse(format!("line {}: bad pid {pid:?}", i + 1)))?;
            reg.register(pid, kind.parse()?)?;
        }
        Ok(reg)
    }
}

fn flock(file: &File, op: libc::c_int) -> std::io::Result<()> {
    // SAFETY: flock on a descriptor owned by `file` for its lifetime.
    let rc = unsafe { libc::flock(file.as_raw_fd(), op) };
    if rc == 0 {
        Ok(())
    } else {
        Err(std::io::Error::last_os_error())
    }
}

/// The registry persisted as a small text file guarded by `flock`.
#[derive(Debug, Clone)]
pub struct RegistryFile {
    path: PathBuf,
}

impl RegistryFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RegistryFile { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Reads the registry under a shared lock. A missing file is an empty
    /// registry.
    pub fn load(&self) -> Result<ServiceRegistry, MonitorError> {
        let mut file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ServiceRegistry::new()),
            Err(e) => return Err(e.into()),
        };
        flock(&file, libc::LOCK_SH)?;
        let mut text = String::new();
        let read = file.read_to_string(&mut text);
        flock(&file, libc::LOCK_UN)?;
        read?;
        ServiceRegistry::parse(&text)
    }

    /// Rewrites the file under an exclusive lock.
    pub fn store(&self, reg: &ServiceRegistry) -> Result<(), MonitorError> {
        let mut file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&self.path)?;
        flock(&file, libc::LOCK_EX)?;
        let res = (|| {
            file.set_len(0)?;
            file.seek(SeekFrom::Start(0))?;
            file.write_all(reg.to_text().as_bytes())?;
            file.sync_data()
        })();
        flock(&file, libc::LOCK_UN)?;
        res?;
        Ok(())
    }
}

/// Allocator-side probe that re-reads the registry file on every call.
#[derive(Debug, Clone)]
pub struct FileProbe {
    file: RegistryFile,
}

impl FileProbe {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileProbe {
            file: RegistryFile::new(path),
        }
    }
}

impl RegistryProbe for FileProbe {
    fn is_registered(&self, pid: u32) -> bool {
        match self.file.load() {
            Ok(reg) => reg.is_registered(pid),
            Err(e) => {
                log::debug!("registry probe failed: {e}");
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn register_examples() {
        let mut r = ServiceRegistry::new();
        assert!(!r.is_registered(42));
        r.register(42, ServiceKind::LatencyCritical).unwrap();
        assert!(r.is_registered(42));
        r.register(42, ServiceKind::LatencyCritical).unwrap();
        assert_eq!(r.latency_critical().count(), 1);
        assert!(matches!(
            r.register(42, ServiceKind::Batch),
            Err(MonitorError::Conflict { pid: 42, .. })
        ));
        assert!(r.unregister(42));
        assert!(!r.is_registered(42));
        assert!(!r.unregister(42));
    }

    #[test]
    fn text_round_trip() {
        let mut r = ServiceRegistry::new();
        r.register(7, ServiceKind::Batch).unwrap();
        r.register(3, ServiceKind::LatencyCritical).unwrap();
        assert_eq!(r.to_text(), "3 LC\n7 BATCH\n");
        assert_eq!(ServiceRegistry::parse(&r.to_text()).unwrap(), r);
        assert!(ServiceRegistry::parse("1 LC\n1 BATCH\n").is_err());
        assert!(ServiceRegistry::parse("x LC").is_err());
        assert!(ServiceRegistry::parse("1 FOO").is_err());
    }

    #[test]
    fn file_and_probe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry");
        let file = RegistryFile::new(&path);
        assert!(file.load().unwrap().is_empty());
        let probe = FileProbe::new(&path);
        assert!(!probe.is_registered(10));
        let mut r = ServiceRegistry::new();
        r.register(10, ServiceKind::LatencyCritical).unwrap();
        file.store(&r).unwrap();
        assert!(probe.is_registered(10));
        r.unregister(10);
        file.store(&r).unwrap();
        assert!(!probe.is_registered(10));
    }

    #[derive(Debug, Clone)]
    enum Cmd {
        Lc(u32),
        Batch(u32),
        Unreg(u32),
    }

    proptest! {
        #[test]
        fn behaves_like_disjoint_sets(cmds in prop::collection::vec(
            prop_oneof![
                (0u32..16).prop_map(Cmd::Lc),
                (0u32..16).prop_map(Cmd::Batch),
                (0u32..16).prop_map(Cmd::Unreg),
            ],
            0..64,
        )) {
            let mut r = ServiceRegistry::new();
            let mut model: HashMap<u32, ServiceKind> = HashMap::new();
            for c in cmds {
                match c {
                    Cmd::Lc(p) | Cmd::Batch(p) => {
                        let kind = if matches!(c, Cmd::Lc(_)) { ServiceKind::LatencyCritical } else { ServiceKind::Batch };
                        let res = r.register(p, kind);
                        match model.get(&p) {
                            Some(k) if *k != kind => prop_assert!(res.is_err()),
                            _ => {
                                prop_assert!(res.is_ok());
                                model.insert(p, kind);
                            }
                        }
                    }
                    Cmd::Unreg(p) => {
                        prop_assert_eq!(r.unregister(p), model.remove(&p).is_some());
                    }
                }
                for p in 0..16 {
                    prop_assert_eq!(r.kind(p), model.get(&p).copied());
                    prop_assert_eq!(r.is_registered(p), model.get(&p) == Some(&ServiceKind::LatencyCritical));
                }
            }
        }
    }
}
