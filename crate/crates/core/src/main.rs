use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use irida::demo::{run_demo, DemoOptions};
use irida::icu::{self, ControlReply, IcuConfig};
use irida::ivu::{self, IvuOptions, ReplaySpeed};
use irida::journal::write_journal;
use irida::net_state::{FadeConfig, Millis};
use irida::sim::{self, Script, SimConfig};

#[derive(Parser)]
#[command(
    name = "irida",
    version,
    about = "Visualization pipeline for sensor network testbeds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the control unit: relay protocol lines to registered visualizers.
    Icu(IcuArgs),
    /// Simulate a grid of nodes running neighbor discovery and event flooding.
    Sim(SimArgs),
    /// Run a headless visualizer against a control unit.
    Ivu(IvuArgs),
    /// Re-send a recorded journal over UDP.
    Replay(ReplayArgs),
    /// Control unit, simulated grid and headless visualizer in one process.
    Demo(DemoArgs),
}

#[derive(Args)]
struct IcuArgs {
    /// UDP port receiving protocol lines [default: 47000]
    #[arg(long)]
    data_port: Option<u16>,
    /// UDP port for visualizer registration [default: 47001]
    #[arg(long)]
    control_port: Option<u16>,
    /// TCP port serving the WebSocket relay at /stream (off unless set)
    #[arg(long)]
    ws_port: Option<u16>,
    /// Also read protocol lines from standard input
    #[arg(long)]
    stdin: bool,
    /// Parse relayed lines and count failures (lines are relayed regardless)
    #[arg(long)]
    validate: bool,
    /// Seconds without a ping before a visualizer is dropped [default: 60]
    #[arg(long)]
    ivu_ttl_secs: Option<u64>,
    /// Log filter, e.g. info or irida=debug [default: info]
    #[arg(long)]
    log_level: Option<String>,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Grid size as WIDTHxHEIGHT
    #[arg(long, default_value = "4x4", value_parser = parse_grid)]
    grid: (u32, u32),
    /// Seed for every random draw
    #[arg(long)]
    seed: Option<u64>,
    /// Wall seconds per virtual second; 0 runs as fast as possible
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    #[arg(long, default_value_t = 15_000)]
    hello_period_ms: Millis,
    #[arg(long, default_value_t = 5_000)]
    hello_jitter_max_ms: Millis,
    #[arg(long, default_value_t = 1_000)]
    listen_base_ms: Millis,
    #[arg(long, default_value_t = 200)]
    listen_jitter_max_ms: Millis,
    #[arg(long, default_value_t = 1_000)]
    extra_read_window_ms: Millis,
    /// Send/process window during which a node is deaf (with --deaf-while-busy)
    #[arg(long, default_value_t = 100)]
    busy_window_ms: Millis,
    #[arg(long, default_value_t = 5_000)]
    heartbeat_period_ms: Millis,
    /// Largest Manhattan distance accepted as a neighbor
    #[arg(long, default_value_t = 2)]
    neighbor_distance_max: u32,
    /// Radio reach in cells (Chebyshev); whole grid when unset
    #[arg(long)]
    radio_range: Option<u32>,
    /// Independent drop probability per delivery
    #[arg(long, default_value_t = 0.0)]
    loss_probability: f64,
    /// Drop deliveries that arrive while a node is sending or processing
    #[arg(long)]
    deaf_while_busy: bool,
    /// Accelerometer change that triggers an event
    #[arg(long, default_value_t = 1.0)]
    accel_threshold: f64,
    /// Remembered (origin, seq) pairs per node
    #[arg(long, default_value_t = 32)]
    dedup_capacity: usize,
    /// Comma-separated node ids in row-major order
    #[arg(long, value_delimiter = ',')]
    node_ids: Option<Vec<String>>,
}

impl GridArgs {
    fn config(&self) -> SimConfig {
        SimConfig {
            grid_width: self.grid.0,
            grid_height: self.grid.1,
            hello_period_ms: self.hello_period_ms,
            hello_jitter_max_ms: self.hello_jitter_max_ms,
            listen_base_ms: self.listen_base_ms,
            listen_jitter_max_ms: self.listen_jitter_max_ms,
            extra_read_window_ms: self.extra_read_window_ms,
            busy_window_ms: self.busy_window_ms,
            heartbeat_period_ms: self.heartbeat_period_ms,
            neighbor_distance_max: self.neighbor_distance_max,
            radio_range: self.radio_range,
            loss_probability: self.loss_probability,
            deaf_while_busy: self.deaf_while_busy,
            accel_threshold: self.accel_threshold,
            dedup_capacity: self.dedup_capacity,
            seed: self.seed.unwrap_or(0),
            node_ids: self.node_ids.clone(),
            icu_endpoint: None,
            time_scale: self.time_scale,
        }
    }
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Control unit data address (live mode)
    #[arg(long, value_parser = parse_addr)]
    icu: Option<SocketAddr>,
    /// Event script; runs in virtual time and writes a journal (needs --seed)
    #[arg(long, requires = "seed")]
    script: Option<PathBuf>,
    /// Journal output for scripted runs [default: stdout]
    #[arg(long, requires = "script")]
    out: Option<PathBuf>,
    /// Stop at this virtual time; overrides the script's `stop`
    #[arg(long)]
    stop_ms: Option<Millis>,
}

#[derive(Args)]
struct IvuArgs {
    /// Control unit control address
    #[arg(long, value_parser = parse_addr)]
    icu: SocketAddr,
    /// Local UDP port for relayed lines (0 picks one)
    #[arg(long, default_value_t = 0)]
    port: u16,
    /// Append every received line to this journal
    #[arg(long)]
    record: Option<PathBuf>,
    /// Write the final snapshot here on exit
    #[arg(long)]
    dump_on_exit: Option<PathBuf>,
    #[arg(long, default_value_t = 30_000)]
    node_fade_ms: Millis,
    #[arg(long, default_value_t = 30_000)]
    link_fade_ms: Millis,
}

#[derive(Args)]
struct ReplayArgs {
    /// Journal to replay
    file: PathBuf,
    /// Destination address (a control unit data port or a visualizer)
    #[arg(long, value_parser = parse_addr)]
    target: SocketAddr,
    /// Playback speed factor
    #[arg(long, default_value_t = 1.0, conflicts_with = "instant")]
    speed: f64,
    /// Send back to back, ignoring recorded offsets
    #[arg(long)]
    instant: bool,
}

#[derive(Args)]
struct DemoArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Stop after this many virtual seconds; runs until interrupted if unset
    #[arg(long)]
    duration_secs: Option<u64>,
    #[arg(long, default_value_t = icu::DEFAULT_DATA_PORT)]
    data_port: u16,
    #[arg(long, default_value_t = icu::DEFAULT_CONTROL_PORT)]
    control_port: u16,
    #[arg(long, default_value_t = icu::DEFAULT_DATA_PORT + 2)]
    ws_port: u16,
    /// Event script; defaults to one shake of the first node at 8 s
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    dump_on_exit: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let dim = |d: &str| match d.trim().parse::<u32>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("bad grid dimension `{d}`")),
    };
    Ok((dim(w)?, dim(h)?))
}

fn parse_addr(s: &str) -> Result<SocketAddr, String> {
    s.to_socket_addrs()
        .map_err(|e| format!("bad address `{s}`: {e}"))?
        .next()
        .ok_or_else(|| format!("`{s}` resolves to nothing"))
}

fn init_logging(level: &str) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(io::stderr)
        .try_init();
}

fn runtime() -> io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
}

async fn ctrl_c() {
    if tokio::signal::ctrl_c().await.is_err() {
        std::future::pending::<()>().await;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Icu(args) => cmd_icu(args),
        Command::Sim(args) => cmd_sim(args),
        Command::Ivu(args) => cmd_ivu(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Demo(args) => cmd_demo(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irida: {e}");
            ExitCode::from(1)
        }
    }
}

type CmdResult = Result<(), Box<dyn std::error::Error>>;

fn cmd_icu(args: IcuArgs) -> CmdResult {
    let mut config = match std::env::var_os(icu::CONFIG_ENV) {
        Some(path) => IcuConfig::from_kv_file(path)?,
        None => IcuConfig::default(),
    };
    if let Some(p) = args.data_port {
        config.data_port = p;
    }
    if let Some(p) = args.control_port {
        config.control_port = p;
    }
    if args.ws_port.is_some() {
        config.ws_port = args.ws_port;
    }
    config.stdin |= args.stdin;
    config.validate |= args.validate;
    if let Some(t) = args.ivu_ttl_secs {
        config.ivu_ttl_secs = t;
    }
    if let Some(l) = args.log_level {
        config.log_level = l;
    }
    init_logging(&config.log_level);
    runtime()?.block_on(async {
        icu::run_icu(config, ctrl_c()).await?;
        Ok(())
    })
}

fn cmd_sim(args: SimArgs) -> CmdResult {
    init_logging("info");
    let mut config = args.grid.config();
    if let Some(path) = &args.script {
        let mut script = Script::parse(&std::fs::read_to_string(path)?)?;
        if args.stop_ms.is_some() {
            script.stop = args.stop_ms;
        }
        let result = sim::run_scripted(config, &script)?;
        match &args.out {
            Some(out) => write_journal(BufWriter::new(File::create(out)?), &result.records)?,
            None => {
                let stdout = io::stdout();
                let mut lock = stdout.lock();
                write_journal(&mut lock, &result.records)?;
                lock.flush()?;
            }
        }
        tracing::info!(stats = ?result.stats, lines = result.records.len(), "scripted run finished");
        return Ok(());
    }

    let endpoint = args
        .icu
        .ok_or("live mode needs --icu <host:port> (or --script)")?;
    config.icu_endpoint = Some(endpoint);
    let stop = Arc::new(AtomicBool::new(false));
    let rt = runtime()?;
    let flag = stop.clone();
    rt.spawn(async move {
        ctrl_c().await;
        flag.store(true, Ordering::Relaxed);
    });
    let stats = sim::run_live(config, &Script::default(), args.stop_ms, &stop)?;
    tracing::info!(?stats, "simulation stopped");
    Ok(())
}

fn cmd_ivu(args: IvuArgs) -> CmdResult {
    init_logging("info");
    let mut options = IvuOptions::new(args.icu);
    options.local_port = args.port;
    options.record = args.record;
    options.dump_on_exit = args.dump_on_exit;
    options.fade = FadeConfig {
        node_fade_ms: args.node_fade_ms,
        link_fade_ms: args.link_fade_ms,
        ..FadeConfig::default()
    };
    runtime()?.block_on(async {
        let report = ivu::run_headless(options, ctrl_c()).await?;
        tracing::info!(
            nodes = report.snapshot.node_count(),
            links = report.snapshot.link_count(),
            lines = report.stats.lines_received,
            parse_failures = report.stats.parse_failures,
            "visualizer stopped"
        );
        Ok(())
    })
}

fn cmd_replay(args: ReplayArgs) -> CmdResult {
    init_logging("info");
    let speed = if args.instant {
        ReplaySpeed::Instant
    } else {
        ReplaySpeed::Factor(args.speed)
    };
    let n = ivu::replay(&args.file, args.target, speed)?;
    tracing::info!(lines = n, target = %args.target, "replay finished");
    Ok(())
}

fn query_status(control: SocketAddr) -> io::Result<String> {
    let socket = UdpSocket::bind(if control.is_ipv4() {
        "0.0.0.0:0"
    } else {
        "[::]:0"
    })?;
    socket.set_read_timeout(Some(Duration::from_secs(1)))?;
    socket.send_to(b"STATUS\n", control)?;
    let mut buf = [0u8; 256];
    let (n, _) = socket.recv_from(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf[..n]).trim().to_string())
}

fn cmd_demo(args: DemoArgs) -> CmdResult {
    init_logging("info");
    let mut sim_config = args.grid.config();
    if args.grid.seed.is_none() {
        sim_config.seed = 1;
    }
    let script = match &args.script {
        Some(path) => Script::parse(&std::fs::read_to_string(path)?)?,
        None => {
            let first = sim::Simulation::new(sim_config.clone())?.nodes()[0]
                .id
                .clone();
            Script {
                shakes: vec![(8_000, first, 2.5)],
                stop: None,
            }
        }
    };
    let options = DemoOptions {
        sim: sim_config,
        script,
        duration_ms: args.duration_secs.map(|s| s * 1000),
        icu: IcuConfig {
            data_port: args.data_port,
            control_port: args.control_port,
            ws_port: Some(args.ws_port),
            ..IcuConfig::default()
        },
        record: args.record,
        dump_on_exit: args.dump_on_exit,
        ..DemoOptions::default()
    };
    runtime()?.block_on(async {
        let report = run_demo(
            options,
            |ep| {
                println!("data:      {}", ep.data);
                println!("control:   {}", ep.control);
                if let Some(url) = &ep.ws_url {
                    println!("websocket: {url}");
                }
                println!("ivu:       {}", ep.ivu);
                match query_status(ep.control) {
                    Ok(line) => println!("{line}"),
                    Err(e) => println!("status query failed: {e}"),
                }
                let _ = io::stdout().flush();
            },
            ctrl_c(),
        )
        .await?;
        println!(
            "{}",
            ControlReply::Status {
                ivus: report.icu.ivus,
                lines_in: report.icu.lines_in,
                lines_out: report.icu.lines_out,
            }
        );
        println!(
            "visualizer: nodes={} links={} lines={} parse_failures={}",
            report.ivu.snapshot.node_count(),
            report.ivu.snapshot.link_count(),
            report.ivu.stats.lines_received,
            report.ivu.stats.parse_failures
        );
        Ok(())
    })
}
