use std::fmt::Write as _;

use super::{BenchError, LatencySeries};

pub const DEFAULT_PERCENTILES: [f64; 5] = [50.0, 90.0, 95.0, 99.0, 99.9];

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p / 100 * n)`, ranks counted from 1.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty series");
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
    /// `(p, value)` pairs in request order.
    pub percentiles: Vec<(f64, f64)>,
}

impl Summary {
    pub fn percentile(&self, p: f64) -> Option<f64> {
        self.percentiles
            .iter()
            .find(|(q, _)| (q - p).abs() < 1e-9)
            .map(|(_, v)| *v)
    }
}

fn sorted_latencies(series: &LatencySeries) -> Result<Vec<f64>, BenchError> {
    if series.samples.is_empty() {
        return Err(BenchError::EmptySeries);
    }
    let mut v: Vec<f64> = series.samples.iter().map(|s| s.1).collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn summarize(series: &LatencySeries, percentiles: &[f64]) -> Result<Summary, BenchError> {
    let sorted = sorted_latencies(series)?;
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(Summary {
        count: sorted.len(),
        mean,
        max: *sorted.last().expect("non-empty"),
        percentiles: percentiles.iter().map(|&p| (p, nearest_rank(&sorted, p))).collect(),
    })
}

/// Empirical CDF as `latency_us,fraction`, one row per distinct latency.
pub fn cdf_csv(series: &LatencySeries) -> Result<String, BenchError> {
    let sorted = sorted_latencies(series)?;
    let n = sorted.len() as f64;
    let mut out = String::from("latency_us,fraction\n");
    for (i, v) in sorted.iter().enumerate() {
        if sorted.get(i + 1) == Some(v) {
            continue;
        }
        let _ = writeln!(out, "{v},{}", (i + 1) as f64 / n);
    }
    Ok(out)
}

/// Relative reduction of `new` against `base`, in percent.
pub fn reduction_pct(base: f64, new: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (base - new) / base * 100.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub baseline: f64,
    pub candidate: f64,
    pub reduction_pct: f64,
}

/// Mean and per-percentile reductions of `candidate` relative to `baseline`.
pub fn compare(baseline: &Summary, candidate: &Summary) -> Vec<ComparisonRow> {
    let mut rows = vec![ComparisonRow {
        label: "mean".into(),
        baseline: baseline.mean,
        candidate: candidate.mean,
        reduction_pct: reduction_pct(baseline.mean, candidate.mean),
    }];
    for &(p, b) in &baseline.percentiles {
        if let Some(c) = candidate.percentile(p) {
            rows.push(ComparisonRow {
                label: format!("p{p}"),
                baseline: b,
                candidate: c,
                reduction_pct: reduction_pct(b, c),
            });
        }
    }
    rows
}

pub fn format_summary(s: &Summary) -> String {
    let mut out = format!("samples {}\nmean    {:.3} us\n", s.count, s.mean);
    for (p, v) in &s.percentiles {
        let _ = writeln!(out, "{:<7} {v:.3} us", format!("p{p}"));
    }
    let _ = writeln!(out, "max     {:.3} us", s.max);
    out
}

pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{:<8} {:>14} {:>14} {:>10}\n", "stat", "baseline_us", "candidate_us", "reduction");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} {:>14.3} {:>14.3} {:>9.1}%",
            r.label, r.baseline, r.candidate, r.reduction_pct
        );
    }
    out
}

/// Service-level objective: the nearest-rank p90 of a baseline series
/// measured without memory pressure.
pub fn compute_slo(baseline: &LatencySeries) -> Result<f64, BenchError> {
    let sorted = sorted_latencies(baseline)?;
    Ok(nearest_rank(&sorted, 90.0))
}

/// Fraction of samples strictly above `slo`.
pub fn slo_violation(series: &LatencySeries, slo: f64) -> Result<f64, BenchError> {
    if !(slo > 0.0) {
        return Err(BenchError::InvalidArgument(format!("slo must be positive, got {slo}")));
    }
    if series.samples.is_empty() {
        return Err(BenchError::EmptySeries);
    }
    let over = series.samples.iter().filter(|s| s.1 > slo).count();
    Ok(over as f64 / series.samples.len() as f64)
}
