use std::os::unix::net::UnixListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;

use hermes::backend::{Backend, OsBackend, SimBackend, SimConfig};
use hermes::config::{parse_bytes, GB};
use hermes::monitor::{Daemon, FileSource, ProcSource, ReclaimConfig, RegistryFile, SimManifest};

/// Tracks latency-critical and batch processes and drops batch-job file
/// cache, largest file first, when memory usage goes above a threshold.
#[derive(Debug, Parser)]
#[command(name = "hermes-monitor", version)]
struct Args {
    /// Usage fraction that triggers a reclaim pass.
    #[arg(long, default_value_t = 0.90)]
    adv_thr: f64,
    /// Poll period in milliseconds.
    #[arg(long, default_value_t = 100)]
    poll_ms: u64,
    /// Registry file shared with allocator processes.
    #[arg(long, default_value = "/tmp/hermes-registry")]
    registry_path: PathBuf,
    /// Control socket path.
    #[arg(long)]
    socket: Option<PathBuf>,
    /// Append advisories to this CSV file.
    #[arg(long)]
    advisory_log: Option<PathBuf>,
    /// Run against a simulated node whose batch files are declared in this
    /// manifest (`<pid> <file> <size> [cached]` per line).
    #[arg(long)]
    sim_manifest: Option<PathBuf>,
    /// Simulated node configuration (`key = value` lines).
    #[arg(long, requires = "sim_manifest")]
    sim_config: Option<PathBuf>,
    /// Anonymous memory held by other processes on the simulated node.
    #[arg(long, requires = "sim_manifest", value_parser = parse_size)]
    sim_pressure: Option<u64>,
    /// Stop after this many passes.
    #[arg(long)]
    passes: Option<u64>,
}

fn parse_size(s: &str) -> Result<u64, String> {
    parse_bytes(s).map_err(|e| e.to_string())
}

fn setup(args: &Args) -> Result<(Arc<dyn Backend>, Box<dyn FileSource>), String> {
    let Some(manifest_path) = &args.sim_manifest else {
        return Ok((Arc::new(OsBackend::new()), Box::new(ProcSource::default())));
    };
    let manifest = SimManifest::load(manifest_path).map_err(|e| e.to_string())?;
    let cfg = match &args.sim_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            SimConfig::parse(&text).map_err(|e| e.to_string())?
        }
        None => SimConfig::with_capacity(16 * GB),
    };
    let sim = SimBackend::new(cfg).map_err(|e| e.to_string())?;
    for e in &manifest.entries {
        sim.load_file(e.file.clone(), e.cached).map_err(|e| e.to_string())?;
    }
    if let Some(bytes) = args.sim_pressure {
        sim.add_pressure(bytes).map_err(|e| e.to_string())?;
    }
    Ok((Arc::new(sim), Box::new(manifest)))
}

fn run(args: Args) -> Result<(), String> {
    let config = ReclaimConfig {
        adv_thr: args.adv_thr,
        poll_period: Duration::from_millis(args.poll_ms),
    };
    let (backend, source) = setup(&args)?;
    let registry = RegistryFile::new(&args.registry_path);
    let daemon = Arc::new(Daemon::new(backend, source, config, Some(registry)).map_err(|e| e.to_string())?);
    if let Some(p) = &args.advisory_log {
        daemon.log_advisories_to(p).map_err(|e| e.to_string())?;
    }
    let stop = Arc::new(AtomicBool::new(false));
    let server = match &args.socket {
        Some(path) => {
            let _ = std::fs::remove_file(path);
            let listener = UnixListener::bind(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let d = Arc::clone(&daemon);
            let stop = Arc::clone(&stop);
            Some(std::thread::spawn(move || d.serve(listener, stop)))
        }
        None => None,
    };
    log::info!(
        "monitoring with adv_thr={} poll={}ms registry={}",
        args.adv_thr,
        args.poll_ms,
        args.registry_path.display()
    );
    let res = daemon.run_poll_loop(&stop, args.passes);
    stop.store(true, std::sync::atomic::Ordering::Release);
    if let Some(h) = server {
        let _ = h.join();
    }
    if let Some(path) = &args.socket {
        let _ = std::fs::remove_file(path);
    }
    println!("{}", daemon.handle_command("STAT"));
    res.map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hermes-monitor: {e}");
            ExitCode::FAILURE
        }
    }
}
