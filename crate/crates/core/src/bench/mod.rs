//! Fixed-size allocation micro benchmark, memory pressure generators and
//! latency reporting.

mod micro;
mod pressure;
pub mod report;

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::alloc::AllocError;
use crate::backend::BackendError;
use crate::config::{parse_bytes, ConfigError};

pub use micro::{run_micro, sweep_rsv_factor, RoundSample, RunOptions, RunOutcome, SweepRow};
pub use pressure::{gen_anon_pressure, gen_file_pressure, PressureHandle, PressureSpec, PRESSURE_STEP};
pub use report::{compare, compute_slo, slo_violation, summarize, ComparisonRow, Summary};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("empty latency series")]
    EmptySeries,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("series parse error at line {line}: {msg}")]
    SeriesParse { line: usize, msg: String },
    #[error("pressure target unreachable: {0}")]
    Pressure(String),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Unmanaged allocator: on-demand growth and mapping.
    Baseline,
    /// Registered allocator with reservation rounds.
    Hermes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Real,
    Sim,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Hermes => "hermes",
        })
    }
}

impl FromStr for Mode {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "hermes" => Ok(Mode::Hermes),
            _ => Err(BenchError::InvalidArgument(format!("unknown mode `{s}`"))),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Real => "real",
            BackendKind::Sim => "sim",
        })
    }
}

impl FromStr for BackendKind {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s {
            "real" => Ok(BackendKind::Real),
            "sim" => Ok(BackendKind::Sim),
            _ => Err(BenchError::InvalidArgument(format!("unknown backend `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub request_size: u64,
    pub total_bytes: u64,
    pub mode: Mode,
    pub backend: BackendKind,
    /// Replaces the policy's reservation factor when set.
    pub rsv_factor: Option<f64>,
    /// Think time between consecutive requests, in microseconds.
    pub gap_us: f64,
    /// Free every other allocation right after the next one is made.
    pub churn: bool,
}

impl WorkloadSpec {
    pub fn new(request_size: u64, total_bytes: u64, mode: Mode, backend: BackendKind) -> Self {
        WorkloadSpec {
            request_size,
            total_bytes,
            mode,
            backend,
            rsv_factor: None,
            gap_us: 0.0,
            churn: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.request_size == 0 {
            return Err(BenchError::InvalidArgument("request size must be positive".into()));
        }
        if self.total_bytes < self.request_size {
            return Err(BenchError::InvalidArgument(format!(
                "total {} is below request size {}",
                self.total_bytes, self.request_size
            )));
        }
        if let Some(f) = self.rsv_factor {
            if !(f > 0.0 && f.is_finite()) {
                return Err(BenchError::InvalidArgument(format!("rsv_factor {f} must be positive")));
            }
        }
        if !(self.gap_us >= 0.0 && self.gap_us.is_finite()) {
            return Err(BenchError::InvalidArgument(format!("gap {} must be non-negative", self.gap_us)));
        }
        Ok(())
    }

    /// Number of requests in a completed run.
    pub fn request_count(&self) -> u64 {
        self.total_bytes.div_ceil(self.request_size)
    }
}

/// Per-request latencies in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySeries {
    /// `(seq, latency_us)`, seq counted from 0.
    pub samples: Vec<(u64, f64)>,
    pub spec: Option<WorkloadSpec>,
    /// Set when the run stopped early on an allocation failure.
    pub aborted: Option<String>,
    /// Cost of one timer read pair, in microseconds (real backend only).
    pub timer_overhead_us: Option<f64>,
}

pub const SERIES_CSV_HEADER: &str = "seq,latency_us";

impl LatencySeries {
    pub fn from_latencies(latencies: impl IntoIterator<Item = f64>) -> Self {
        LatencySeries {
            samples: latencies.into_iter().enumerate().map(|(i, v)| (i as u64, v)).collect(),
            spec: None,
            aborted: None,
            timer_overhead_us: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn latencies(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(16 * self.samples.len() + 16);
        out.push_str(SERIES_CSV_HEADER);
        out.push('\n');
        for (seq, v) in &self.samples {
            let _ = writeln!(out, "{seq},{v}");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, BenchError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| BenchError::SeriesParse {
            line: 1,
            msg: e.to_string(),
        })?;
        if headers.iter().collect::<Vec<_>>() != ["seq", "latency_us"] {
            return Err(BenchError::SeriesParse {
                line: 1,
                msg: format!("expected header `{SERIES_CSV_HEADER}`"),
            });
        }
        let mut samples = Vec::new();
        for (i, rec) in reader.deserialize::<(u64, f64)>().enumerate() {
            let (seq, v) = rec.map_err(|e| BenchError::SeriesParse {
                line: i + 2,
                msg: e.to_string(),
            })?;
            if !(v >= 0.0) {
                return Err(BenchError::SeriesParse {
                    line: i + 2,
                    msg: format!("latency {v} is negative"),
                });
            }
            samples.push((seq, v));
        }
        Ok(LatencySeries {
            samples,
            spec: None,
            aborted: None,
            timer_overhead_us: None,
        })
    }
}

pub(crate) fn parse_size_arg(s: &str) -> Result<u64, BenchError> {
    Ok(parse_bytes(s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GB, KB};

    #[test]
    fn request_counts() {
        let s = WorkloadSpec::new(KB, GB, Mode::Baseline, BackendKind::Sim);
        assert_eq!(s.request_count(), 1_048_576);
        let s = WorkloadSpec::new(256 * KB, GB, Mode::Baseline, BackendKind::Sim);
        assert_eq!(s.request_count(), 4096);
        let s = WorkloadSpec::new(3, 10, Mode::Baseline, BackendKind::Sim);
        assert_eq!(s.request_count(), 4);
    }

    #[test]
    fn spec_validation() {
        assert!(WorkloadSpec::new(KB, KB - 1, Mode::Hermes, BackendKind::Sim).validate().is_err());
        assert!(WorkloadSpec::new(0, KB, Mode::Hermes, BackendKind::Sim).validate().is_err());
        let mut s = WorkloadSpec::new(KB, KB, Mode::Hermes, BackendKind::Sim);
        assert!(s.validate().is_ok());
        s.rsv_factor = Some(0.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = LatencySeries::from_latencies([1.5, 0.0, 42.25]);
        let text = s.to_csv();
        assert!(text.starts_with("seq,latency_us\n0,1.5\n"));
        assert_eq!(LatencySeries::parse_csv(&text).unwrap().samples, s.samples);
    }

    #[test]
    fn csv_errors() {
        assert!(LatencySeries::parse_csv("a,b\n1,2\n").is_err());
        assert!(LatencySeries::parse_csv("seq,latency_us\n1,x\n").is_err());
        assert!(LatencySeries::parse_csv("seq,latency_us\n1,-3\n").is_err());
    }

    #[test]
    fn mode_and_backend_names() {
        assert_eq!("hermes".parse::<Mode>().unwrap(), Mode::Hermes);
        assert_eq!(Mode::Baseline.to_string(), "baseline");
        assert_eq!("sim".parse::<BackendKind>().unwrap(), BackendKind::Sim);
        assert!("x".parse::<BackendKind>().is_err());
    }
}
