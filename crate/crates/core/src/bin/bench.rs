use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hermes::backend::SimConfig;
use hermes::bench::report::{cdf_csv, format_comparison, format_summary, DEFAULT_PERCENTILES};
use hermes::bench::{
    compare, compute_slo, run_micro, slo_violation, summarize, sweep_rsv_factor, BackendKind, BenchError,
    LatencySeries, Mode, PressureSpec, RunOptions, WorkloadSpec,
};
use hermes::config::parse_bytes;
use hermes::ReservationPolicy;

/// Allocation-latency micro benchmark.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the fill workload and record per-request latencies.
    Run {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value = "hermes")]
        mode: Mode,
        /// Override the reservation factor.
        #[arg(long)]
        rsv_factor: Option<f64>,
        /// Write the series as `seq,latency_us` CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the management-round trace as CSV (simulated runs).
        #[arg(long)]
        rounds_out: Option<PathBuf>,
    },
    /// Summarize a recorded series, optionally against a baseline.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Latency objective in microseconds; prints the violation ratio.
        #[arg(long)]
        slo: Option<f64>,
        /// Use the baseline's p90 as the objective.
        #[arg(long, conflicts_with = "slo", requires = "baseline")]
        slo_from_baseline: bool,
        /// Write the empirical CDF as CSV.
        #[arg(long)]
        cdf: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PERCENTILES)]
        percentiles: Vec<f64>,
    },
    /// Run the workload for each reservation factor and compare with the
    /// baseline.
    Sweep {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 3.0])]
        factor: Vec<f64>,
    },
}

#[derive(Debug, Args)]
struct WorkloadArgs {
    /// Request size, e.g. `1KB` or `256KB`.
    #[arg(long, value_parser = parse_size)]
    size: u64,
    /// Total bytes requested over the run.
    #[arg(long, value_parser = parse_size, default_value = "1GB")]
    total: u64,
    #[arg(long, default_value = "sim")]
    backend: BackendKind,
    /// `none`, `anon:<free>` or `file:<bytes>,<free>`.
    #[arg(long, default_value = "none")]
    pressure: PressureSpec,
    /// Think time between requests in microseconds.
    #[arg(long, default_value_t = 0.0)]
    gap_us: f64,
    /// Free every other block during the fill (allocator stress).
    #[arg(long)]
    churn: bool,
    /// Policy file (`key = value` lines).
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Simulated node file (`key = value` lines).
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// Simulated node capacity; ignored with `--sim-config`.
    #[arg(long, value_parser = parse_size)]
    capacity: Option<u64>,
    /// Directory for file-pressure scratch files.
    #[arg(long)]
    scratch_dir: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<u64, String> {
    parse_bytes(s).map_err(|e| e.to_string())
}

fn read(path: &PathBuf) -> Result<String, BenchError> {
    std::fs::read_to_string(path)
        .map_err(|e| BenchError::InvalidArgument(format!("{}: {e}", path.display())))
}

impl WorkloadArgs {
    fn spec(&self, mode: Mode, rsv_factor: Option<f64>) -> WorkloadSpec {
        WorkloadSpec {
            rsv_factor,
            gap_us: self.gap_us,
            churn: self.churn,
            ..WorkloadSpec::new(self.size, self.total, mode, self.backend)
        }
    }

    fn options(&self) -> Result<RunOptions, BenchError> {
        let policy = match &self.policy {
            Some(p) => ReservationPolicy::parse(&read(p)?)?,
            None => ReservationPolicy::default(),
        };
        let sim = match (&self.sim_config, self.capacity) {
            (Some(p), _) => SimConfig::parse(&read(p)?)?,
            (None, Some(c)) => SimConfig::with_capacity(c),
            (None, None) => SimConfig::default(),
        };
        Ok(RunOptions {
            policy,
            sim,
            pressure: self.pressure,
            scratch_dir: self.scratch_dir.clone().unwrap_or_else(std::env::temp_dir),
        })
    }
}

/// Returns false when the run was aborted.
fn cmd_run(
    w: WorkloadArgs,
    mode: Mode,
    rsv_factor: Option<f64>,
    out: Option<PathBuf>,
    rounds_out: Option<PathBuf>,
) -> Result<bool, BenchError> {
    let spec = w.spec(mode, rsv_factor);
    let outcome = run_micro(&spec, &w.options()?)?;
    let series = &outcome.series;
    if let Some(p) = &out {
        std::fs::write(p, series.to_csv())?;
    }
    if let Some(p) = &rounds_out {
        let mut csv = String::from("round,at_us,top_free,pool_total,heap_tgt,mmap_tgt,small_demand,large_demand\n");
        for r in &outcome.rounds {
            let _ = writeln!(
                csv,
                "{},{:.3},{},{},{},{},{},{}",
                r.round, r.at_us, r.top_free, r.pool_total, r.heap.tgt_mem, r.mmap.tgt_mem, r.small_demand, r.large_demand
            );
        }
        std::fs::write(p, csv)?;
    }
    println!(
        "{} {} size={} total={} requests={}",
        spec.backend,
        spec.mode,
        spec.request_size,
        spec.total_bytes,
        spec.request_count()
    );
    if let Some(o) = series.timer_overhead_us {
        println!("timer overhead {o:.3} us per sample");
    }
    if spec.backend == BackendKind::Sim && spec.mode == Mode::Hermes {
        println!("rounds {}  lock wait {:.1} us", outcome.rounds.len(), outcome.lock_wait_us);
    }
    if !series.is_empty() {
        print!("{}", format_summary(&summarize(series, &DEFAULT_PERCENTILES)?));
    }
    if let Some(msg) = &series.aborted {
        eprintln!("run aborted after {} samples: {msg}", series.len());
        return Ok(false);
    }
    Ok(true)
}

fn cmd_report(
    input: PathBuf,
    baseline: Option<PathBuf>,
    slo: Option<f64>,
    slo_from_baseline: bool,
    cdf: Option<PathBuf>,
    percentiles: Vec<f64>,
) -> Result<(), BenchError> {
    if let Some(p) = percentiles.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
        return Err(BenchError::InvalidArgument(format!("percentile {p} not in (0, 100]")));
    }
    let series = LatencySeries::parse_csv(&read(&input)?)?;
    let summary = summarize(&series, &percentiles)?;
    if let Some(p) = &cdf {
        std::fs::write(p, cdf_csv(&series)?)?;
    }
    let base = match &baseline {
        Some(b) => Some(LatencySeries::parse_csv(&read(b)?)?),
        None => None,
    };
    match &base {
        Some(b) => print!("{}", format_comparison(&compare(&summarize(b, &percentiles)?, &summary))),
        None => print!("{}", format_summary(&summary)),
    }
    let slo = match (slo, &base) {
        (Some(s), _) => Some(s),
        (None, Some(b)) if slo_from_baseline => Some(compute_slo(b)?),
        _ => None,
    };
    if let Some(s) = slo {
        println!("slo {s:.3} us  violation {:.4}", slo_violation(&series, s)?);
        if let Some(b) = &base {
            println!("baseline violation {:.4}", slo_violation(b, s)?);
        }
    }
    Ok(())
}

fn cmd_sweep(w: WorkloadArgs, factors: Vec<f64>) -> Result<(), BenchError> {
    let spec = w.spec(Mode::Hermes, None);
    let (base, rows) = sweep_rsv_factor(&factors, &spec, &w.options()?)?;
    println!("baseline mean {:.3} us  p99 {:.3} us", base.mean, base.percentile(99.0).unwrap_or(f64::NAN));
    let labels: Vec<String> = rows[0].reductions.iter().map(|r| r.label.clone()).collect();
    let mut header = format!("{:<8}", "factor");
    for l in &labels {
        let _ = write!(header, " {l:>9}");
    }
    println!("{header}");
    for row in &rows {
        let mut line = format!("{:<8}", row.factor);
        for r in &row.reductions {
            let _ = write!(line, " {:>8.1}%", r.reduction_pct);
        }
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let res = match Cli::parse().cmd {
        Command::Run {
            workload,
            mode,
            rsv_factor,
            out,
            rounds_out,
        } => cmd_run(workload, mode, rsv_factor, out, rounds_out).map(|completed| {
            if completed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }),
        Command::Report {
            input,
            baseline,
            slo,
            slo_from_baseline,
            cdf,
            percentiles,
        } => cmd_report(input, baseline, slo, slo_from_baseline, cdf, percentiles).map(|_| ExitCode::SUCCESS),
        Command::Sweep { workload, factor } => cmd_sweep(workload, factor).map(|_| ExitCode::SUCCESS),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}
