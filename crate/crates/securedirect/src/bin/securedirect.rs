//! Command-line front end.
//!
//! Exit codes: 0 success (or a benign verdict), 1 attack verdict from
//! `inspect`, 2 configuration or parse error, 3 bind failure, 4 I/O error.

use std::fmt::Display;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use securedirect::bench::{run_bench, BenchError};
use securedirect::capture::write_capture;
use securedirect::config::{Config, ConfigError};
use securedirect::core::ids::{inspect, load_signatures, SignatureDb};
use securedirect::core::sim::{Scenario, ScenarioName, SimError, Topology};
use securedirect::ids_net::IdsServer;
use securedirect::live::{IdsMode, LiveProxy};

#[derive(Parser)]
#[command(name = "securedirect", version, about = "Content-inspecting load balancer with honeypot deflection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve signature verdicts over TCP.
    IdsServe {
        #[arg(long)]
        signatures: PathBuf,
        #[arg(long)]
        listen: SocketAddr,
    },
    /// Run a simulated scenario and write its trace.
    RunSim {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: ScenarioName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Simulated load at several rates; writes CSV, SVG and text per rate.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "3600,14400,18000")]
        rates: Vec<u64>,
        /// Simulated seconds per rate.
        #[arg(long, default_value_t = 3600)]
        duration: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stream-level proxy on real sockets.
    ProxyLive {
        #[arg(long)]
        config: PathBuf,
        /// Keep one IDS connection open instead of one per query.
        #[arg(long)]
        pooled: bool,
    },
    /// Print the verdict for one payload. Exits 1 on an attack.
    Inspect {
        #[arg(long)]
        signatures: PathBuf,
        #[arg(long)]
        payload_file: PathBuf,
    },
    /// Run a scenario and write the honeypot capture log.
    ExportCaptures {
        #[arg(long)]
        scenario: ScenarioName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Display) -> Failure {
    Failure { code, message: message.to_string() }
}

const PARSE: u8 = 2;
const BIND: u8 = 3;
const IO: u8 = 4;

fn read_signatures(path: &Path) -> Result<SignatureDb, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(IO, format!("{}: {e}", path.display())))?;
    load_signatures(&text).map_err(|e| fail(PARSE, format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    Config::load(path).map_err(|e| match e {
        ConfigError::Io { .. } => fail(IO, e),
        _ => fail(PARSE, format!("{}: {e}", path.display())),
    })
}

fn topology(config: Option<&Path>) -> Result<Topology, Failure> {
    let Some(path) = config else { return Ok(Topology::minimal()) };
    let cfg = load_config(path)?;
    let mut topo = Topology::from_config(cfg.balancer);
    if let Some(sig) = &cfg.signatures {
        topo.signatures = Arc::new(read_signatures(sig)?);
    }
    topo.validate().map_err(|e| fail(PARSE, e))?;
    Ok(topo)
}

fn sim_failure(e: SimError) -> Failure {
    fail(PARSE, e)
}

fn run(cmd: Command) -> Result<u8, Failure> {
    match cmd {
        Command::IdsServe { signatures, listen } => {
            let db = read_signatures(&signatures)?;
            log::info!("loaded {} signatures", db.len());
            let server = IdsServer::bind(listen, Arc::new(db)).map_err(|e| fail(BIND, format!("{listen}: {e}")))?;
            log::info!("listening on {}", server.local_addr().map_err(|e| fail(IO, e))?);
            server.serve().map_err(|e| fail(IO, e))?;
            Ok(0)
        }
        Command::RunSim { config, scenario, seed, trace } => {
            let topo = topology(config.as_deref())?;
            let result = Scenario::build(scenario, topo, seed).run().map_err(sim_failure)?;
            std::fs::write(&trace, result.to_text()).map_err(|e| fail(IO, format!("{}: {e}", trace.display())))?;
            print!("{}", result.summary());
            Ok(0)
        }
        Command::Bench { rates, duration, out, seed, config } => {
            let topo = topology(config.as_deref())?;
            let run = run_bench(&rates, duration, seed, &topo, &out).map_err(|e| match e {
                BenchError::Write { .. } => fail(IO, e),
                _ => fail(PARSE, e),
            })?;
            for (r, f) in run.reports.iter().zip(&run.files) {
                println!(
                    "{:>6} pages/hour: {}/{} completed, mean {:.3} ms, p95 {} ms -> {}",
                    r.rate_per_hour,
                    r.completed(),
                    r.scheduled,
                    r.summary.mean(),
                    r.summary.p95,
                    f.csv.display()
                );
            }
            println!("comparison plot: {}", run.comparison.display());
            Ok(0)
        }
        Command::ProxyLive { config, pooled } => {
            let cfg = load_config(&config)?;
            let ids = match (&cfg.ids_endpoint, &cfg.signatures) {
                (Some(addr), _) => {
                    IdsMode::Remote { addr: *addr, timeout: Duration::from_millis(cfg.balancer.ids_timeout_ms), pooled }
                }
                (None, Some(sig)) => IdsMode::InProcess(Arc::new(read_signatures(sig)?)),
                (None, None) => return Err(fail(PARSE, "config needs `ids_endpoint` or `signatures`")),
            };
            let listen = cfg.listen;
            let proxy = LiveProxy::bind(cfg, ids).map_err(|e| fail(BIND, format!("{listen}: {e}")))?;
            log::info!("proxying on {}", proxy.local_addr().map_err(|e| fail(IO, e))?);
            proxy.run().map_err(|e| fail(IO, e))?;
            Ok(0)
        }
        Command::Inspect { signatures, payload_file } => {
            let db = read_signatures(&signatures)?;
            let payload =
                std::fs::read(&payload_file).map_err(|e| fail(IO, format!("{}: {e}", payload_file.display())))?;
            let v = inspect(&db, &payload);
            let ids: Vec<String> = v.matched.iter().map(u32::to_string).collect();
            println!("attack={} matched=[{}]", v.attack, ids.join(","));
            Ok(u8::from(v.attack))
        }
        Command::ExportCaptures { scenario, seed, out, config } => {
            let topo = topology(config.as_deref())?;
            let result = Scenario::build(scenario, topo, seed).run().map_err(sim_failure)?;
            let n = write_capture(&result.capture, &out).map_err(|e| fail(IO, format!("{}: {e}", out.display())))?;
            println!("{} records, {n} bytes -> {}", result.capture.len(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
