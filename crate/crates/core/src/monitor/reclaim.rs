use std::path::PathBuf;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use super::registry::ServiceRegistry;
use super::scan::BatchFileEntry;
use super::MonitorError;
use crate::backend::{Advice, Backend, BackendStats};

pub const ADVISORY_CSV_HEADER: &str = "ts,file,bytes,usage_before,usage_after";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReclaimConfig {
    /// Memory usage fraction above which file cache is dropped.
    pub adv_thr: f64,
    pub poll_period: Duration,
}

impl Default for ReclaimConfig {
    fn default() -> Self {
        ReclaimConfig {
            adv_thr: 0.90,
            poll_period: Duration::from_millis(100),
        }
    }
}

impl ReclaimConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        if !(self.adv_thr > 0.0 && self.adv_thr < 1.0) {
            return Err(MonitorError::Parse(format!("adv_thr {} not in (0, 1)", self.adv_thr)));
        }
        if self.poll_period.is_zero() {
            return Err(MonitorError::Parse("poll period must be non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advisory {
    /// Seconds since the Unix epoch.
    pub ts: f64,
    pub file: PathBuf,
    /// Size of the file the advice was issued for.
    pub bytes: u64,
    pub released: u64,
    pub usage_before: f64,
    pub usage_after: f64,
}

impl Advisory {
    pub fn csv_line(&self) -> String {
        format!(
            "{:.6},{},{},{:.6},{:.6}",
            self.ts,
            self.file.display(),
            self.bytes,
            self.usage_before,
            self.usage_after
        )
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Drops batch-job file cache largest file first while usage is above
/// `adv_thr`. Files owned by latency-critical pids are never touched. Stats
/// are re-read after every advisory and the pass stops at the first reading
/// at or below the threshold.
pub fn reclaim_pass(
    backend: &dyn Backend,
    stats: BackendStats,
    entries: &[BatchFileEntry],
    registry: &ServiceRegistry,
    config: &ReclaimConfig,
) -> Vec<Advisory> {
    let mut usage = stats.usage();
    if usage <= config.adv_thr {
        return Vec::new();
    }
    let mut order: Vec<&BatchFileEntry> = entries
        .iter()
        .filter(|e| !registry.is_registered(e.owner))
        .collect();
    order.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.file.cmp(&b.file)));
    let mut issued = Vec::new();
    for e in order {
        let released = match backend.advise_release_file_cache(&e.file, e.size) {
            Ok(Advice::Released { bytes }) => bytes,
            Ok(_) => 0,
            Err(err) => {
                log::warn!("advice for {} failed: {err}", e.file.display());
                continue;
            }
        };
        let after = match backend.memory_stats() {
            Ok(s) => s.usage(),
            Err(err) => {
                log::warn!("memory stats unavailable: {err}");
                usage
            }
        };
        issued.push(Advisory {
            ts: unix_now(),
            file: e.file.clone(),
            bytes: e.size,
            released,
            usage_before: usage,
            usage_after: after,
        });
        usage = after;
        if usage <= config.adv_thr {
            break;
        }
    }
    issued
}
