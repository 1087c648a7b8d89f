//! anchorctl: run and inspect the bus runtime.
//!
//! One subcommand per role (broker, gateway, demo roles, benchmarks) plus
//! inspection tooling (records dump, log replay, broker stats). Exit codes:
//! 0 success, 1 usage, 2 configuration, 3 runtime failure, 4 verification
//! mismatch.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use anchor_core::bench;
use anchor_core::broker::{Broker, BrokerConfig};
use anchor_core::config::Config;
use anchor_core::demo::{self, DemoConfig};
use anchor_core::gateway::{Gateway, GatewayConfig, LinkConfig};
use anchor_core::record::{GroupValues, Region};
use anchor_core::transport::Endpoint;
use anchor_core::wire::WireLimits;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "anchorctl", version, about = "ANCHOR runtime control tool")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a cluster master.
    Broker(BrokerArgs),
    /// Run cross-cluster gateway links.
    Gateway(GatewayArgs),
    /// Closed-loop demo roles and the supervised run.
    #[command(subcommand)]
    Demo(DemoCmd),
    /// Latency and recovery benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Record region inspection.
    #[command(subcommand)]
    Records(RecordsCmd),
    /// Replay log tooling.
    #[command(subcommand)]
    Log(LogCmd),
    /// Query a broker's stats dump.
    Stats(StatsArgs),
}

#[derive(Args)]
struct BrokerArgs {
    /// host:port (or mem:name) to listen on.
    #[arg(long)]
    listen: String,
    /// Optional key=value config file ([broker] section).
    #[arg(long)]
    config: Option<PathBuf>,
    /// On-disk state region path (overrides the config file).
    #[arg(long)]
    state_region: Option<PathBuf>,
    /// Validate configuration and exit.
    #[arg(long)]
    check_config: bool,
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    check_config: bool,
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Windowed ingestion writing record aggregates.
    Producer(DemoRoleArgs),
    /// Policy inference publishing commands.
    Inference(DemoInferenceArgs),
    /// Command execution against the simulated plant.
    Executor(DemoRoleArgs),
    /// Feedback materialization into the record region.
    Materializer(DemoRoleArgs),
    /// Supervise a full N-cycle run (broker plus all roles) and audit it.
    Run(DemoRunArgs),
}

#[derive(Args)]
struct DemoRoleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    check_config: bool,
}

#[derive(Args)]
struct DemoInferenceArgs {
    #[arg(long)]
    config: PathBuf,
    /// Cycle count (defaults to the config's `cycles`).
    #[arg(long)]
    cycles: Option<u64>,
    #[arg(long)]
    check_config: bool,
}

#[derive(Args)]
struct DemoRunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    cycles: Option<u64>,
    #[arg(long)]
    check_config: bool,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Latency distribution for one configuration, or the full grid.
    Latency(BenchLatencyArgs),
    /// Crash-and-restart throughput trace.
    Recovery(BenchRecoveryArgs),
    /// Internal: paced publisher role.
    #[command(hide = true)]
    LatencyPub(LatencyPubArgs),
    /// Internal: stamping subscriber role.
    #[command(hide = true)]
    LatencySub(LatencySubArgs),
}

#[derive(Args)]
struct BenchLatencyArgs {
    #[arg(long, default_value_t = 128)]
    payload: usize,
    #[arg(long, default_value_t = 1000)]
    rate: u64,
    #[arg(long, default_value_t = 30.0)]
    duration_s: f64,
    /// Run the {128,1024} x {1000,5000} grid instead of one config.
    #[arg(long)]
    grid: bool,
    /// Repetitions (grid mode), interleaved round-robin.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchRecoveryArgs {
    #[arg(long, default_value_t = 1000)]
    rate: u64,
    #[arg(long, default_value_t = 128)]
    payload: usize,
    #[arg(long, default_value_t = 10.0)]
    kill_after_s: f64,
    #[arg(long, default_value_t = 5.0)]
    downtime_s: f64,
    #[arg(long, default_value_t = 15.0)]
    post_restart_s: f64,
    #[arg(long, default_value_t = 0.5)]
    bin_width_s: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LatencyPubArgs {
    #[arg(long)]
    endpoint: String,
    #[arg(long, default_value = "bench")]
    channel: String,
    #[arg(long)]
    payload: usize,
    #[arg(long)]
    rate: u64,
    #[arg(long)]
    duration_s: f64,
    #[arg(long, default_value_t = 3)]
    prio: u8,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LatencySubArgs {
    #[arg(long)]
    endpoint: String,
    #[arg(long, default_value = "bench")]
    channel: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    idle_timeout_s: u64,
}

#[derive(Subcommand)]
enum RecordsCmd {
    /// Print a consistent snapshot of a region as JSON.
    Dump(RecordsDumpArgs),
}

#[derive(Args)]
struct RecordsDumpArgs {
    #[arg(long)]
    region: PathBuf,
    /// Comma-separated group names (default: all).
    #[arg(long)]
    groups: Option<String>,
}

#[derive(Subcommand)]
enum LogCmd {
    /// Re-execute a recorded run and verify the recorded events.
    Replay(LogReplayArgs),
}

#[derive(Args)]
struct LogReplayArgs {
    /// Executor log of the recorded run.
    #[arg(long)]
    path: PathBuf,
    /// Demo config the run was recorded under.
    #[arg(long)]
    config: PathBuf,
    /// Compare against another run's log instead of re-executing only.
    #[arg(long)]
    verify_against: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    endpoint: String,
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    // SAFETY: the handler only stores into an atomic, which is
    // async-signal-safe.
    unsafe {
        libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
        libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    install_signal_handlers();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                // clap reserves exit code 2 for usage; this tool uses 1.
                eprintln!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Cmd::Broker(args) => run_broker(args),
        Cmd::Gateway(args) => run_gateway(args),
        Cmd::Demo(cmd) => run_demo(cmd),
        Cmd::Bench(cmd) => run_bench(cmd),
        Cmd::Records(RecordsCmd::Dump(args)) => records_dump(args),
        Cmd::Log(LogCmd::Replay(args)) => log_replay(args),
        Cmd::Stats(args) => stats(args),
    }
}

fn broker_config_from(cfg: Option<&Config>) -> Result<BrokerConfig, Box<dyn std::error::Error>> {
    let mut out = BrokerConfig::default();
    if let Some(cfg) = cfg {
        out.queue_capacity = cfg.parse("broker", "queue_capacity", out.queue_capacity)?;
        out.batch_bytes_threshold =
            cfg.parse("broker", "batch_bytes_threshold", out.batch_bytes_threshold)?;
        let residence_us =
            cfg.parse("broker", "max_residence_us", out.max_residence.as_micros() as u64)?;
        out.max_residence = Duration::from_micros(residence_us);
        let tick_us = cfg.parse("broker", "tick_us", (residence_us / 4).max(1))?;
        out.tick = Duration::from_micros(tick_us);
        let hb_ms = cfg.parse(
            "broker",
            "heartbeat_timeout_ms",
            out.heartbeat_timeout.as_millis() as u64,
        )?;
        out.heartbeat_timeout = Duration::from_millis(hb_ms);
        out.send_channel_frames =
            cfg.parse("broker", "send_channel_frames", out.send_channel_frames)?;
        let mut limits = WireLimits::default();
        limits.max_payload = cfg.parse("broker", "max_payload", limits.max_payload)?;
        limits.max_frame = cfg.parse("broker", "max_frame", limits.max_frame)?;
        out.limits = limits;
        if let Some(path) = cfg.get("broker", "state_region") {
            out.state_region = Some(PathBuf::from(path));
        }
    }
    Ok(out)
}

fn run_broker(args: BrokerArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let file_cfg = match &args.config {
        Some(path) => match Config::from_file(path) {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("config error: {e}");
                return Ok(ExitCode::from(EXIT_CONFIG));
            }
        },
        None => None,
    };
    let endpoint = match Endpoint::parse(&args.listen) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("bad --listen value: {e}");
            return Ok(ExitCode::from(EXIT_CONFIG));
        }
    };
    let mut cfg = match broker_config_from(file_cfg.as_ref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(EXIT_CONFIG));
        }
    };
    if let Some(path) = args.state_region {
        cfg.state_region = Some(path);
    }
    if args.check_config {
        println!("configuration ok");
        return Ok(ExitCode::SUCCESS);
    }
    let mut broker = Broker::start(&endpoint, cfg)?;
    wait_for_stop();
    broker.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn run_gateway(args: GatewayArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let cfg = match Config::from_file(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(EXIT_CONFIG));
        }
    };
    let mut gw_cfg = GatewayConfig::new(&cfg.get_or("gateway", "id", "gw"));
    gw_cfg.dedupe_capacity = cfg.parse("gateway", "dedupe_capacity", gw_cfg.dedupe_capacity)?;
    gw_cfg.max_hops = cfg.parse("gateway", "max_hops", gw_cfg.max_hops)?;
    for (section, entries) in cfg.sections() {
        let Some(name) = section.strip_prefix("link:") else {
            continue;
        };
        let a = entries.get("a").cloned().unwrap_or_default();
        let b = entries.get("b").cloned().unwrap_or_default();
        let (a, b) = match (Endpoint::parse(&a), Endpoint::parse(&b)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                eprintln!("link {name}: both `a` and `b` endpoints are required");
                return Ok(ExitCode::from(EXIT_CONFIG));
            }
        };
        let regions: Vec<String> = entries
            .get("regions")
            .map(|s| {
                s.split(',')
                    .map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty())
                    .collect()
            })
            .unwrap_or_default();
        gw_cfg.links.push(LinkConfig {
            name: name.to_string(),
            a,
            b,
            regions,
        });
    }
    if gw_cfg.links.is_empty() {
        eprintln!("gateway config has no [link:NAME] sections");
        return Ok(ExitCode::from(EXIT_CONFIG));
    }
    if args.check_config {
        println!("configuration ok ({} links)", gw_cfg.links.len());
        return Ok(ExitCode::SUCCESS);
    }
    let gateway = Gateway::start(gw_cfg);
    wait_for_stop();
    gateway.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn run_demo(cmd: DemoCmd) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cmd {
        DemoCmd::Producer(args) => {
            let Some(cfg) = load_demo_config(&args.config) else {
                return Ok(ExitCode::from(EXIT_CONFIG));
            };
            if args.check_config {
                println!("configuration ok");
                return Ok(ExitCode::SUCCESS);
            }
            let stats = demo::run_producer(&cfg, &STOP)?;
            log::info!(
                "producer done: {} observations, {} skipped, {} writes",
                stats.observations,
                stats.skipped,
                stats.writes
            );
            Ok(ExitCode::SUCCESS)
        }
        DemoCmd::Inference(args) => {
            let Some(cfg) = load_demo_config(&args.config) else {
                return Ok(ExitCode::from(EXIT_CONFIG));
            };
            if args.check_config {
                println!("configuration ok");
                return Ok(ExitCode::SUCCESS);
            }
            let cycles = args.cycles.unwrap_or(cfg.cycles);
            let stats = demo::run_inference(&cfg, cycles, &STOP)?;
            log::info!("inference done: {} cycles, {} stale", stats.cycles, stats.stale);
            if stats.cycles < cycles {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
            Ok(ExitCode::SUCCESS)
        }
        DemoCmd::Executor(args) => {
            let Some(cfg) = load_demo_config(&args.config) else {
                return Ok(ExitCode::from(EXIT_CONFIG));
            };
            if args.check_config {
                println!("configuration ok");
                return Ok(ExitCode::SUCCESS);
            }
            let stats = demo::run_executor(&cfg, &STOP)?;
            log::info!("executor done: {} commands, {} failures", stats.commands, stats.failures);
            Ok(ExitCode::SUCCESS)
        }
        DemoCmd::Materializer(args) => {
            let Some(cfg) = load_demo_config(&args.config) else {
                return Ok(ExitCode::from(EXIT_CONFIG));
            };
            if args.check_config {
                println!("configuration ok");
                return Ok(ExitCode::SUCCESS);
            }
            let stats = demo::run_materializer(&cfg, &STOP)?;
            log::info!(
                "materializer done: {} outcomes, {} successes",
                stats.outcomes,
                stats.successes
            );
            Ok(ExitCode::SUCCESS)
        }
        DemoCmd::Run(args) => {
            let Some(cfg) = load_demo_config(&args.config) else {
                return Ok(ExitCode::from(EXIT_CONFIG));
            };
            if args.check_config {
                println!("configuration ok");
                return Ok(ExitCode::SUCCESS);
            }
            let cycles = args.cycles.unwrap_or(cfg.cycles);
            let exe = std::env::current_exe()?;
            match demo::supervise(&cfg, cycles, &exe) {
                Ok(report) => {
                    println!(
                        "run clean: {} commands, {} events ({} failures, {} stale), \
                         {} aggregate writes audited",
                        report.commands,
                        report.events,
                        report.failures,
                        report.stale_commands,
                        report.aggregate_writes
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Err(demo::DemoError::Audit(reason)) => {
                    eprintln!("trace audit failed: {reason}");
                    Ok(ExitCode::from(EXIT_VERIFY))
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn run_bench(cmd: BenchCmd) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let exe = std::env::current_exe()?;
    match cmd {
        BenchCmd::Latency(args) => {
            if args.grid {
                let summary = bench::run_grid(&exe, args.duration_s, args.reps, &args.out)?;
                println!("{}", serde_json::to_string_pretty(&summary_heads(&summary))?);
            } else {
                let cfg = bench::LatencyConfig::new(args.payload, args.rate, args.duration_s);
                let run = bench::run_latency(&exe, &cfg, &args.out, "single")?;
                println!("{}", serde_json::to_string_pretty(&run)?);
            }
            Ok(ExitCode::SUCCESS)
        }
        BenchCmd::Recovery(args) => {
            let mut cfg = bench::RecoveryConfig::new(
                args.rate,
                args.payload,
                args.kill_after_s,
                args.downtime_s,
            );
            cfg.post_restart_s = args.post_restart_s;
            cfg.bin_width_s = args.bin_width_s;
            let trace = bench::run_recovery(&exe, &cfg, &args.out, Duration::from_secs(5))?;
            println!(
                "steady {:.1}/bin, kill at {} ns, restart at {} ns, recovered: {:?}",
                trace.steady_mean_per_bin, trace.kill_ns, trace.restart_ns, trace.recovered_ns
            );
            Ok(ExitCode::SUCCESS)
        }
        BenchCmd::LatencyPub(args) => {
            let endpoint = Endpoint::parse(&args.endpoint)?;
            let cfg = bench::LatencyConfig {
                payload_bytes: args.payload,
                rate_per_sec: args.rate,
                duration_s: args.duration_s,
                warmup_s: 0.0,
                channel: args.channel,
                prio: args.prio,
            };
            let summary = bench::latency_publisher(&endpoint, "bench-pub", &cfg)?;
            std::fs::write(&args.out, serde_json::to_vec_pretty(&summary)?)?;
            Ok(ExitCode::SUCCESS)
        }
        BenchCmd::LatencySub(args) => {
            let endpoint = Endpoint::parse(&args.endpoint)?;
            let mut stdout = std::io::stdout();
            let summary = bench::latency_subscriber(
                &endpoint,
                "bench-sub",
                &args.channel,
                &args.out,
                Duration::from_secs(args.idle_timeout_s),
                Some(&mut stdout),
            )?;
            log::info!("subscriber done: {} samples", summary.received);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn summary_heads(summary: &bench::GridSummary) -> serde_json::Value {
    serde_json::json!({
        "configs": bench::GRID.iter().map(|(p, r)| format!("{p}B @ {r}/s")).collect::<Vec<_>>(),
        "median_p50_us": summary.median_p50_ns.iter().map(|v| v / 1000).collect::<Vec<_>>(),
        "median_p90_us": summary.median_p90_ns.iter().map(|v| v / 1000).collect::<Vec<_>>(),
        "median_p99_us": summary.median_p99_ns.iter().map(|v| v / 1000).collect::<Vec<_>>(),
    })
}

fn records_dump(args: RecordsDumpArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut region = match Region::open(&args.region) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("cannot open region: {e}");
            return Ok(ExitCode::from(EXIT_CONFIG));
        }
    };
    let schema = region.schema();
    let wanted: Vec<String> = match &args.groups {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => schema.iter().map(|g| g.name.clone()).collect(),
    };
    let refs: Vec<&str> = wanted.iter().map(String::as_str).collect();
    let snap = region.read_snapshot(&refs)?;
    let mut groups = serde_json::Map::new();
    for g in &schema {
        let Some(values) = snap.group(&g.name) else {
            continue;
        };
        let rendered = match values {
            GroupValues::I64(v) => serde_json::json!(v),
            GroupValues::F64(v) => serde_json::json!(v),
            GroupValues::Bytes(v) => {
                serde_json::json!(v.iter().map(|b| hex_string(b)).collect::<Vec<_>>())
            }
        };
        groups.insert(
            g.name.clone(),
            serde_json::json!({
                "writer_role": format!("{:?}", g.writer_role),
                "arity": g.arity,
                "values": rendered,
            }),
        );
    }
    let dump = serde_json::json!({
        "schema_version": snap.schema_version,
        "version_counter": snap.version_counter,
        "groups": groups,
    });
    println!("{}", serde_json::to_string_pretty(&dump)?);
    Ok(ExitCode::SUCCESS)
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn log_replay(args: LogReplayArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let Some(cfg) = load_demo_config(&args.config) else {
        return Ok(ExitCode::from(EXIT_CONFIG));
    };
    let primary = demo::replay_run(&args.path, &cfg);
    let result = match (&primary, &args.verify_against) {
        (Ok(_), Some(other)) => demo::verify_against(&args.path, other),
        _ => primary,
    };
    match result {
        Ok(outcome) => {
            println!(
                "replay ok: {} commands, {} events verified",
                outcome.commands, outcome.events_checked
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(demo::DemoError::ReplayDiverged { cycle, detail }) => {
            eprintln!("replay diverged at cycle {cycle}: {detail}");
            Ok(ExitCode::from(EXIT_VERIFY))
        }
        Err(e) => Err(e.into()),
    }
}

fn stats(args: StatsArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let endpoint = Endpoint::parse(&args.endpoint)?;
    let dump = bench::stats_query(&endpoint, Duration::from_secs(5))?;
    println!("{}", serde_json::to_string_pretty(&dump)?);
    Ok(ExitCode::SUCCESS)
}

fn load_demo_config(path: &PathBuf) -> Option<DemoConfig> {
    match DemoConfig::from_file(path) {
        Ok(cfg) => Some(cfg),
        Err(e) => {
            eprintln!("config error: {e}");
            None
        }
    }
}

fn wait_for_stop() {
    while !STOP.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
}
