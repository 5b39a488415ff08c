use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::registry::ServiceRegistry;
use super::MonitorError;
use crate::config::parse_bytes;

/// A data file held open by a batch job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchFileEntry {
    pub owner: u32,
    pub file: PathBuf,
    pub size: u64,
    /// Cached bytes, an estimate; never above `size`.
    pub cached: u64,
}

/// Result of one scan: the entries found and the batch pids that no longer
/// exist.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanResult {
    pub entries: Vec<BatchFileEntry>,
    pub exited: Vec<u32>,
}

/// Where batch-job files come from.
pub trait FileSource: Send + Sync {
    fn files_of(&self, pid: u32) -> Result<Option<Vec<BatchFileEntry>>, MonitorError>;
}

/// Enumerates open regular files under `/proc/<pid>/fd`.
#[derive(Debug, Clone)]
pub struct ProcSource {
    root: PathBuf,
}

impl Default for ProcSource {
    fn default() -> Self {
        ProcSource {
            root: PathBuf::from("/proc"),
        }
    }
}

impl ProcSource {
    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        ProcSource { root: root.into() }
    }
}

impl FileSource for ProcSource {
    fn files_of(&self, pid: u32) -> Result<Option<Vec<BatchFileEntry>>, MonitorError> {
        let dir = self.root.join(pid.to_string()).join("fd");
        let rd = match fs::read_dir(&dir) {
            Ok(rd) => rd,
            Err(_) => return Ok(None),
        };
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for ent in rd.flatten() {
            let Ok(target) = fs::read_link(ent.path()) else {
                continue;
            };
            let Ok(meta) = fs::metadata(&target) else {
                continue;
            };
            if !meta.is_file() || meta.len() == 0 || !seen.insert(target.clone()) {
                continue;
            }
            out.push(BatchFileEntry {
                owner: pid,
                file: target,
                size: meta.len(),
                cached: meta.len(),
            });
        }
        Ok(Some(out))
    }
}

/// Declared files for simulated runs: one `<pid> <file> <size> [cached]`
/// line per file. Pids without lines count as exited.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimManifest {
    pub entries: Vec<BatchFileEntry>,
}

impl SimManifest {
    pub fn parse(text: &str) -> Result<Self, MonitorError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| MonitorError::Parse(format!("manifest line {}: {what}", i + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            if !(3..=4).contains(&parts.len()) {
                return Err(bad("expected `<pid> <file> <size> [cached]`"));
            }
            let owner = parts[0].parse().map_err(|_| bad("bad pid"))?;
            let size = parse_bytes(parts[2]).map_err(|_| bad("bad size"))?;
            let cached = match parts.get(3) {
                Some(c) => parse_bytes(c).map_err(|_| bad("bad cached size"))?,
                None => size,
            };
            if cached > size {
                return Err(bad("cached exceeds size"));
            }
            entries.push(BatchFileEntry {
                owner,
                file: PathBuf::from(parts[1]),
                size,
                cached,
            });
        }
        Ok(SimManifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self, MonitorError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

impl FileSource for SimManifest {
    fn files_of(&self, pid: u32) -> Result<Option<Vec<BatchFileEntry>>, MonitorError> {
        let files: Vec<_> = self.entries.iter().filter(|e| e.owner == pid).cloned().collect();
        Ok((!files.is_empty()).then_some(files))
    }
}

/// Collects the files of every batch pid, pruning pids that are gone.
pub fn scan_batch_files(registry: &ServiceRegistry, source: &dyn FileSource) -> Result<ScanResult, MonitorError> {
    let mut out = ScanResult::default();
    for pid in registry.batch() {
        match source.files_of(pid)? {
            Some(files) => out.entries.extend(files),
            None => out.exited.push(pid),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GB;
    use crate::monitor::ServiceKind;

    #[test]
    fn manifest_entries_for_batch_pids() {
        let m = SimManifest::parse("# files\n100 /data/a 6GB\n100 /data/b 4GB 1GB\n200 /data/c 1GB\n").unwrap();
        let mut reg = ServiceRegistry::new();
        reg.register(100, ServiceKind::Batch).unwrap();
        let s = scan_batch_files(&reg, &m).unwrap();
        assert_eq!(s.entries.len(), 2);
        assert_eq!(s.entries[0].size, 6 * GB);
        assert_eq!(s.entries[1].cached, GB);
        assert!(s.exited.is_empty());
    }

    #[test]
    fn no_batch_pids_is_empty() {
        let m = SimManifest::parse("100 /data/a 6GB\n").unwrap();
        let mut reg = ServiceRegistry::new();
        reg.register(100, ServiceKind::LatencyCritical).unwrap();
        assert_eq!(scan_batch_files(&reg, &m).unwrap(), ScanResult::default());
    }

    #[test]
    fn exited_pid_is_pruned() {
        let m = SimManifest::parse("100 /data/a 6GB\n").unwrap();
        let mut reg = ServiceRegistry::new();
        reg.register(100, ServiceKind::Batch).unwrap();
        reg.register(101, ServiceKind::Batch).unwrap();
        let s = scan_batch_files(&reg, &m).unwrap();
        assert_eq!(s.entries.len(), 1);
        assert_eq!(s.exited, vec![101]);
    }

    #[test]
    fn manifest_errors() {
        assert!(SimManifest::parse("1 /a").is_err());
        assert!(SimManifest::parse("1 /a 1GB 2GB").is_err());
        assert!(SimManifest::parse("x /a 1GB").is_err());
    }

    #[test]
    fn proc_scan_sees_own_open_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        fs::write(&path, vec![1u8; 8192]).unwrap();
        let _open = fs::File::open(&path).unwrap();
        let pid = std::process::id();
        let files = ProcSource::default().files_of(pid).unwrap().unwrap();
        let hit = files
            .iter()
            .find(|e| e.file == fs::canonicalize(&path).unwrap())
            .expect("open file listed");
        assert_eq!(hit.size, 8192);
        assert_eq!(ProcSource::default().files_of(u32::MAX - 1).unwrap(), None);
    }
}
