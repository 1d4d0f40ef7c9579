//! The control unit: gathers protocol lines from the network and relays each
//! one, byte for byte, to every registered visualizer.
//!
//! Three planes:
//!
//! * data: UDP datagrams carrying one or more newline-separated lines, plus
//!   optional byte-stream sources (standard input stands in for a serial link);
//! * control: UDP request/reply lines used by visualizers to register;
//! * WebSocket (`/stream`): one text frame per relayed line, for browsers.
//!
//! Control grammar (one line per request, reply sent back to the source):
//!
//! ```text
//! IVU_REGISTER <udp_port>    -> OK REGISTERED
//! IVU_UNREGISTER <udp_port>  -> OK UNREGISTERED | ERR NOT_REGISTERED
//! IVU_PING <udp_port>        -> OK PONG | ERR NOT_REGISTERED
//! STATUS                     -> OK STATUS ivus=<n> lines_in=<n> lines_out=<n>
//! anything else              -> ERR BAD_REQUEST
//! ```
//!
//! Registrations are keyed by (source host, given port) and expire when not
//! pinged for `ivu_ttl_secs`.

use std::collections::BTreeMap;
use std::fmt;
use std::future::Future;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::broadcast;
use tokio::task::JoinSet;
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;

use crate::net_state::Millis;
use crate::protocol::{parse_line, LineFramer, ParseError};

pub const DEFAULT_DATA_PORT: u16 = 47000;
pub const DEFAULT_CONTROL_PORT: u16 = 47001;
pub const DEFAULT_IVU_TTL_SECS: u64 = 60;
/// Suggested interval between `IVU_PING`s.
pub const PING_INTERVAL: Duration = Duration::from_secs(15);
pub const DEFAULT_MAX_SEND_FAILURES: u32 = 10;
pub const WS_PATH: &str = "/stream";
pub const CONFIG_ENV: &str = "IRIDA_ICU_CONFIG";

const WS_BACKLOG: usize = 4096;
const MAX_DATAGRAM: usize = 65_535;

#[derive(Debug, Clone, PartialEq)]
pub struct IcuConfig {
    pub bind: IpAddr,
    pub data_port: u16,
    pub control_port: u16,
    pub ws_port: Option<u16>,
    /// Read protocol lines from standard input as an extra source.
    pub stdin: bool,
    /// Parse every relayed line and count failures. Lines are relayed either way.
    pub validate: bool,
    pub ivu_ttl_secs: u64,
    pub max_send_failures: u32,
    pub log_level: String,
}

impl Default for IcuConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            data_port: DEFAULT_DATA_PORT,
            control_port: DEFAULT_CONTROL_PORT,
            ws_port: None,
            stdin: false,
            validate: false,
            ivu_ttl_secs: DEFAULT_IVU_TTL_SECS,
            max_send_failures: DEFAULT_MAX_SEND_FAILURES,
            log_level: "info".into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("reading config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line_no}: {reason}")]
    Invalid { line_no: usize, reason: String },
}

impl IcuConfig {
    /// Overlay `key=value` settings. Keys match the long flag names with
    /// either dashes or underscores; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), ConfigFileError> {
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let invalid = |reason: String| ConfigFileError::Invalid { line_no, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid("expected key=value".into()))?;
            let key = key.trim().replace('-', "_");
            let value = value.trim();
            let bad = |_| invalid(format!("bad value `{value}` for {key}"));
            match key.as_str() {
                "bind" => {
                    self.bind = value
                        .parse()
                        .map_err(|_| invalid(format!("bad address `{value}`")))?
                }
                "data_port" => self.data_port = value.parse().map_err(bad)?,
                "control_port" => self.control_port = value.parse().map_err(bad)?,
                "ws_port" => self.ws_port = Some(value.parse().map_err(bad)?),
                "stdin" => {
                    self.stdin =
                        parse_bool(value).ok_or_else(|| invalid(format!("bad bool `{value}`")))?
                }
                "validate" => {
                    self.validate =
                        parse_bool(value).ok_or_else(|| invalid(format!("bad bool `{value}`")))?
                }
                "ivu_ttl_secs" => self.ivu_ttl_secs = value.parse().map_err(bad)?,
                "max_send_failures" => self.max_send_failures = value.parse().map_err(bad)?,
                "log_level" => self.log_level = value.to_string(),
                other => return Err(invalid(format!("unknown key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self, ConfigFileError> {
        let mut config = Self::default();
        config.apply_kv(&std::fs::read_to_string(path)?)?;
        Ok(config)
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IvuRegistration {
    pub endpoint: SocketAddr,
    pub registered_at: Millis,
    pub last_ping: Millis,
    pub consecutive_failures: u32,
    pub lines_sent: u64,
    pub send_failures: u64,
}

#[derive(Debug, Clone)]
pub struct Registry {
    entries: BTreeMap<SocketAddr, IvuRegistration>,
    ttl_ms: Millis,
    max_failures: u32,
}

impl Registry {
    pub fn new(ttl: Duration, max_failures: u32) -> Self {
        Self {
            entries: BTreeMap::new(),
            ttl_ms: ttl.as_millis() as Millis,
            max_failures,
        }
    }

    /// Returns true if the endpoint was not registered before. Registering
    /// again only refreshes `last_ping`.
    pub fn register(&mut self, endpoint: SocketAddr, now: Millis) -> bool {
        match self.entries.get_mut(&endpoint) {
            Some(reg) => {
                reg.last_ping = reg.last_ping.max(now);
                false
            }
            None => {
                self.entries.insert(
                    endpoint,
                    IvuRegistration {
                        endpoint,
                        registered_at: now,
                        last_ping: now,
                        consecutive_failures: 0,
                        lines_sent: 0,
                        send_failures: 0,
                    },
                );
                true
            }
        }
    }

    pub fn unregister(&mut self, endpoint: &SocketAddr) -> bool {
        self.entries.remove(endpoint).is_some()
    }

    pub fn ping(&mut self, endpoint: &SocketAddr, now: Millis) -> bool {
        match self.entries.get_mut(endpoint) {
            Some(reg) => {
                reg.last_ping = reg.last_ping.max(now);
                true
            }
            None => false,
        }
    }

    /// Remove registrations not pinged for longer than the TTL.
    pub fn sweep(&mut self, now: Millis) -> Vec<SocketAddr> {
        let ttl = self.ttl_ms;
        let expired: Vec<SocketAddr> = self
            .entries
            .values()
            .filter(|r| now.saturating_sub(r.last_ping) > ttl)
            .map(|r| r.endpoint)
            .collect();
        for e in &expired {
            self.entries.remove(e);
        }
        expired
    }

    /// Record the outcome of one send. Returns true if the endpoint was
    /// evicted for failing too many times in a row.
    pub fn record_send(&mut self, endpoint: &SocketAddr, ok: bool) -> bool {
        let Some(reg) = self.entries.get_mut(endpoint) else {
            return false;
        };
        if ok {
            reg.lines_sent += 1;
            reg.consecutive_failures = 0;
            return false;
        }
        reg.send_failures += 1;
        reg.consecutive_failures += 1;
        if reg.consecutive_failures >= self.max_failures {
            self.entries.remove(endpoint);
            return true;
        }
        false
    }

    pub fn endpoints(&self) -> Vec<SocketAddr> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, endpoint: &SocketAddr) -> Option<&IvuRegistration> {
        self.entries.get(endpoint)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct IcuStats {
    pub lines_in: AtomicU64,
    pub lines_out: AtomicU64,
    pub ws_out: AtomicU64,
    pub parse_failures: AtomicU64,
    pub bad_requests: AtomicU64,
    pub send_failures: AtomicU64,
    pub frame_errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatusSnapshot {
    pub ivus: usize,
    pub lines_in: u64,
    pub lines_out: u64,
    pub ws_out: u64,
    pub parse_failures: u64,
    pub bad_requests: u64,
    pub send_failures: u64,
    pub frame_errors: u64,
}

impl IcuStats {
    pub fn snapshot(&self, ivus: usize) -> StatusSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        StatusSnapshot {
            ivus,
            lines_in: get(&self.lines_in),
            lines_out: get(&self.lines_out),
            ws_out: get(&self.ws_out),
            parse_failures: get(&self.parse_failures),
            bad_requests: get(&self.bad_requests),
            send_failures: get(&self.send_failures),
            frame_errors: get(&self.frame_errors),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestKind {
    UdpListener { port: u16 },
    LineStream { name: String },
}

/// One place lines come from, with its own counters.
#[derive(Debug)]
pub struct IngestSource {
    pub kind: IngestKind,
    pub lines_in: AtomicU64,
    pub parse_failures: AtomicU64,
}

impl IngestSource {
    pub fn new(kind: IngestKind) -> Self {
        Self {
            kind,
            lines_in: AtomicU64::new(0),
            parse_failures: AtomicU64::new(0),
        }
    }
}

impl fmt::Display for IngestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IngestKind::UdpListener { port } => write!(f, "udp:{port}"),
            IngestKind::LineStream { name } => write!(f, "stream:{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlReply {
    Registered,
    Unregistered,
    NotRegistered,
    Pong,
    Status {
        ivus: usize,
        lines_in: u64,
        lines_out: u64,
    },
    BadRequest,
}

impl fmt::Display for ControlReply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlReply::Registered => f.write_str("OK REGISTERED"),
            ControlReply::Unregistered => f.write_str("OK UNREGISTERED"),
            ControlReply::NotRegistered => f.write_str("ERR NOT_REGISTERED"),
            ControlReply::Pong => f.write_str("OK PONG"),
            ControlReply::Status {
                ivus,
                lines_in,
                lines_out,
            } => write!(
                f,
                "OK STATUS ivus={ivus} lines_in={lines_in} lines_out={lines_out}"
            ),
            ControlReply::BadRequest => f.write_str("ERR BAD_REQUEST"),
        }
    }
}

impl ControlReply {
    /// Parse a reply line, e.g. on the visualizer side.
    pub fn parse(line: &str) -> Option<Self> {
        let line = line.trim();
        Some(match line {
            "OK REGISTERED" => ControlReply::Registered,
            "OK UNREGISTERED" => ControlReply::Unregistered,
            "ERR NOT_REGISTERED" => ControlReply::NotRegistered,
            "OK PONG" => ControlReply::Pong,
            "ERR BAD_REQUEST" => ControlReply::BadRequest,
            _ => {
                let rest = line.strip_prefix("OK STATUS ")?;
                let mut fields = BTreeMap::new();
                for kv in rest.split(' ') {
                    let (k, v) = kv.split_once('=')?;
                    fields.insert(k, v.parse::<u64>().ok()?);
                }
                ControlReply::Status {
                    ivus: *fields.get("ivus")? as usize,
                    lines_in: *fields.get("lines_in")?,
                    lines_out: *fields.get("lines_out")?,
                }
            }
        })
    }
}

pub fn handle_control_line(
    registry: &mut Registry,
    stats: &IcuStats,
    line: &str,
    source: SocketAddr,
    now: Millis,
) -> ControlReply {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let endpoint = |port: &str| -> Option<SocketAddr> {
        let port: u16 = port.parse().ok()?;
        (port != 0).then(|| SocketAddr::new(source.ip(), port))
    };
    let reply = match tokens.as_slice() {
        ["IVU_REGISTER", port] => endpoint(port).map(|ep| {
            if registry.register(ep, now) {
                tracing::info!(endpoint = %ep, "visualizer registered");
            }
            ControlReply::Registered
        }),
        ["IVU_UNREGISTER", port] => endpoint(port).map(|ep| {
            if registry.unregister(&ep) {
                tracing::info!(endpoint = %ep, "visualizer unregistered");
                ControlReply::Unregistered
            } else {
                ControlReply::NotRegistered
            }
        }),
        ["IVU_PING", port] => endpoint(port).map(|ep| {
            if registry.ping(&ep, now) {
                ControlReply::Pong
            } else {
                ControlReply::NotRegistered
            }
        }),
        ["STATUS"] => Some(ControlReply::Status {
            ivus: registry.len(),
            lines_in: stats.lines_in.load(Ordering::Relaxed),
            lines_out: stats.lines_out.load(Ordering::Relaxed),
        }),
        _ => None,
    };
    reply.unwrap_or_else(|| {
        stats.bad_requests.fetch_add(1, Ordering::Relaxed);
        tracing::debug!(%source, line, "bad control request");
        ControlReply::BadRequest
    })
}

#[derive(Debug, Error)]
pub enum IcuError {
    #[error("cannot bind {what} on {addr}: {source}")]
    Bind {
        what: &'static str,
        addr: SocketAddr,
        source: std::io::Error,
    },
}

/// Shared relay state: the registry and the outbound channels.
pub struct Relay {
    registry: Mutex<Registry>,
    stats: IcuStats,
    out: UdpSocket,
    ws: broadcast::Sender<Arc<str>>,
    validate: bool,
    started: Instant,
}

impl Relay {
    pub fn now(&self) -> Millis {
        self.started.elapsed().as_millis() as Millis
    }

    pub fn stats(&self) -> &IcuStats {
        &self.stats
    }

    pub fn status(&self) -> StatusSnapshot {
        self.stats.snapshot(self.registry().len())
    }

    pub fn registry(&self) -> std::sync::MutexGuard<'_, Registry> {
        self.registry.lock().expect("registry lock poisoned")
    }

    /// Relay one line as received from `source`. Empty lines are skipped.
    pub async fn ingest(&self, source: &IngestSource, line: &[u8]) -> usize {
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            return 0;
        }
        source.lines_in.fetch_add(1, Ordering::Relaxed);
        self.stats.lines_in.fetch_add(1, Ordering::Relaxed);
        if self.validate {
            let text = String::from_utf8_lossy(line);
            match parse_line(&text) {
                Ok(_) | Err(ParseError::EmptyLine) => {}
                Err(e) => {
                    source.parse_failures.fetch_add(1, Ordering::Relaxed);
                    self.stats.parse_failures.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(source = %source.kind, line = %text, error = %e, "relaying unparseable line");
                }
            }
        }
        self.fanout(line).await
    }

    /// Send `line + "\n"` to every registered visualizer and push `line` to
    /// WebSocket subscribers. Returns how many UDP visualizers got it.
    pub async fn fanout(&self, line: &[u8]) -> usize {
        let endpoints = self.registry().endpoints();
        let mut datagram = Vec::with_capacity(line.len() + 1);
        datagram.extend_from_slice(line);
        datagram.push(b'\n');

        let mut sent = 0;
        for ep in endpoints {
            let ok = match self.out.send_to(&datagram, ep).await {
                Ok(_) => true,
                Err(e) => {
                    tracing::debug!(endpoint = %ep, error = %e, "send failed");
                    false
                }
            };
            if ok {
                sent += 1;
            } else {
                self.stats.send_failures.fetch_add(1, Ordering::Relaxed);
            }
            if self.registry().record_send(&ep, ok) {
                tracing::warn!(endpoint = %ep, "dropping visualizer after repeated send failures");
            }
        }
        self.stats
            .lines_out
            .fetch_add(sent as u64, Ordering::Relaxed);

        if self.ws.receiver_count() > 0 {
            let text: Arc<str> = String::from_utf8_lossy(line).into();
            if self.ws.send(text).is_ok() {
                self.stats.ws_out.fetch_add(1, Ordering::Relaxed);
            }
        }
        sent
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.ws.subscribe()
    }

    pub fn ws_subscribers(&self) -> usize {
        self.ws.receiver_count()
    }
}

/// A bound but not yet running control unit.
pub struct Icu {
    relay: Arc<Relay>,
    data: UdpSocket,
    control: UdpSocket,
    ws: Option<TcpListener>,
    streams: Vec<(String, Box<dyn AsyncRead + Send + Unpin>)>,
    sources: Vec<Arc<IngestSource>>,
}

impl Icu {
    pub async fn bind(config: &IcuConfig) -> Result<Self, IcuError> {
        let addr = |port| SocketAddr::new(config.bind, port);
        let bind_udp = |what, a: SocketAddr| async move {
            UdpSocket::bind(a).await.map_err(|source| IcuError::Bind {
                what,
                addr: a,
                source,
            })
        };
        let data = bind_udp("data port", addr(config.data_port)).await?;
        let control = bind_udp("control port", addr(config.control_port)).await?;
        let out = bind_udp("relay socket", addr(0)).await?;
        let ws = match config.ws_port {
            Some(port) => {
                let a = addr(port);
                Some(
                    TcpListener::bind(a)
                        .await
                        .map_err(|source| IcuError::Bind {
                            what: "websocket port",
                            addr: a,
                            source,
                        })?,
                )
            }
            None => None,
        };
        let (ws_tx, _) = broadcast::channel(WS_BACKLOG);
        let relay = Arc::new(Relay {
            registry: Mutex::new(Registry::new(
                Duration::from_secs(config.ivu_ttl_secs),
                config.max_send_failures,
            )),
            stats: IcuStats::default(),
            out,
            ws: ws_tx,
            validate: config.validate,
            started: Instant::now(),
        });
        let data_port = data.local_addr().map(|a| a.port()).unwrap_or_default();
        let mut icu = Self {
            relay,
            data,
            control,
            ws,
            streams: Vec::new(),
            sources: vec![Arc::new(IngestSource::new(IngestKind::UdpListener {
                port: data_port,
            }))],
        };
        if config.stdin {
            icu.add_line_stream("stdin", tokio::io::stdin());
        }
        Ok(icu)
    }

    /// Add a byte-stream source of newline-terminated lines.
    pub fn add_line_stream(&mut self, name: &str, reader: impl AsyncRead + Send + Unpin + 'static) {
        self.sources
            .push(Arc::new(IngestSource::new(IngestKind::LineStream {
                name: name.to_string(),
            })));
        self.streams.push((name.to_string(), Box::new(reader)));
    }

    pub fn data_addr(&self) -> SocketAddr {
        self.data.local_addr().expect("bound socket")
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control.local_addr().expect("bound socket")
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws.as_ref().and_then(|l| l.local_addr().ok())
    }

    pub fn relay(&self) -> Arc<Relay> {
        self.relay.clone()
    }

    pub fn sources(&self) -> Vec<Arc<IngestSource>> {
        self.sources.clone()
    }

    /// Serve until `shutdown` resolves, then log and return the final counters.
    pub async fn run(self, shutdown: impl Future<Output = ()>) -> StatusSnapshot {
        let Icu {
            relay,
            data,
            control,
            ws,
            streams,
            sources,
        } = self;
        tracing::info!(
            data = %data.local_addr().expect("bound"),
            control = %control.local_addr().expect("bound"),
            "control unit running"
        );
        let mut tasks = JoinSet::new();
        tasks.spawn(udp_ingest(relay.clone(), data, sources[0].clone()));
        for ((name, reader), source) in streams.into_iter().zip(sources.iter().skip(1)) {
            tasks.spawn(stream_ingest(relay.clone(), name, reader, source.clone()));
        }
        tasks.spawn(control_loop(relay.clone(), control));
        tasks.spawn(sweeper(relay.clone()));
        if let Some(listener) = ws {
            tasks.spawn(ws_accept(relay.clone(), listener));
        }

        shutdown.await;
        tasks.shutdown().await;
        let status = relay.status();
        tracing::info!(
            ivus = status.ivus,
            lines_in = status.lines_in,
            lines_out = status.lines_out,
            ws_out = status.ws_out,
            parse_failures = status.parse_failures,
            bad_requests = status.bad_requests,
            send_failures = status.send_failures,
            "control unit stopped"
        );
        for s in &sources {
            tracing::info!(
                source = %s.kind,
                lines_in = s.lines_in.load(Ordering::Relaxed),
                parse_failures = s.parse_failures.load(Ordering::Relaxed),
                "source counters"
            );
        }
        status
    }
}

pub async fn run_icu(
    config: IcuConfig,
    shutdown: impl Future<Output = ()>,
) -> Result<StatusSnapshot, IcuError> {
    let icu = Icu::bind(&config).await?;
    Ok(icu.run(shutdown).await)
}

async fn udp_ingest(relay: Arc<Relay>, socket: UdpSocket, source: Arc<IngestSource>) {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    loop {
        let n = match socket.recv_from(&mut buf).await {
            Ok((n, _)) => n,
            Err(e) => {
                tracing::debug!(error = %e, "data socket receive error");
                continue;
            }
        };
        // Each datagram stands alone: an unterminated tail is a complete line.
        let mut framer = LineFramer::new();
        let frames = framer.push(&buf[..n]);
        if let Some(e) = frames.error {
            relay.stats.frame_errors.fetch_add(1, Ordering::Relaxed);
            tracing::warn!(error = %e, "dropping oversize line");
        }
        for line in frames
            .lines
            .iter()
            .map(Vec::as_slice)
            .chain(framer.finish().as_deref())
        {
            relay.ingest(&source, line).await;
        }
    }
}

async fn stream_ingest(
    relay: Arc<Relay>,
    name: String,
    mut reader: Box<dyn AsyncRead + Send + Unpin>,
    source: Arc<IngestSource>,
) {
    let mut framer = LineFramer::new();
    let mut buf = vec![0u8; 8192];
    loop {
        let n = match reader.read(&mut buf).await {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) => {
                tracing::warn!(source = %name, error = %e, "line stream failed");
                break;
            }
        };
        let frames = framer.push(&buf[..n]);
        if let Some(e) = frames.error {
            relay.stats.frame_errors.fetch_add(1, Ordering::Relaxed);
            tracing::warn!(source = %name, error = %e, "dropping oversize line");
        }
        for line in &frames.lines {
            relay.ingest(&source, line).await;
        }
    }
    if let Some(tail) = framer.finish() {
        relay.ingest(&source, &tail).await;
    }
    tracing::info!(source = %name, "line stream closed");
}

async fn control_loop(relay: Arc<Relay>, socket: UdpSocket) {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    loop {
        let (n, from) = match socket.recv_from(&mut buf).await {
            Ok(r) => r,
            Err(e) => {
                tracing::debug!(error = %e, "control socket receive error");
                continue;
            }
        };
        let text = String::from_utf8_lossy(&buf[..n]).into_owned();
        let mut lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            lines.push("");
        }
        for line in lines {
            let reply = {
                let now = relay.now();
                let mut registry = relay.registry();
                handle_control_line(&mut registry, &relay.stats, line, from, now)
            };
            let _ = socket.send_to(format!("{reply}\n").as_bytes(), from).await;
        }
    }
}

async fn sweeper(relay: Arc<Relay>) {
    let mut every = tokio::time::interval(Duration::from_secs(1));
    loop {
        every.tick().await;
        let now = relay.now();
        for ep in relay.registry().sweep(now) {
            tracing::info!(endpoint = %ep, "visualizer registration expired");
        }
    }
}

async fn ws_accept(relay: Arc<Relay>, listener: TcpListener) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                tokio::spawn(ws_session(relay.clone(), stream, peer));
            }
            Err(e) => tracing::warn!(error = %e, "websocket accept failed"),
        }
    }
}

// The handshake callback signature is fixed by tungstenite.
#[allow(clippy::result_large_err)]
async fn ws_session(relay: Arc<Relay>, stream: TcpStream, peer: SocketAddr) {
    let check_path = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        if req.uri().path() == WS_PATH {
            Ok(resp)
        } else {
            let mut err = ErrorResponse::new(Some(format!("only {WS_PATH} is served")));
            *err.status_mut() = StatusCode::NOT_FOUND;
            Err(err)
        }
    };
    let ws = match tokio_tungstenite::accept_hdr_async(stream, check_path).await {
        Ok(ws) => ws,
        Err(e) => {
            tracing::debug!(%peer, error = %e, "websocket handshake failed");
            return;
        }
    };
    tracing::info!(%peer, "websocket subscriber connected");
    let mut lines = relay.subscribe();
    let (mut sink, mut incoming) = ws.split();
    loop {
        tokio::select! {
            line = lines.recv() => match line {
                Ok(line) => {
                    if sink.send(Message::text(line.as_ref())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!(%peer, skipped = n, "websocket subscriber lagging");
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            msg = incoming.next() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    tracing::info!(%peer, "websocket subscriber gone");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src() -> SocketAddr {
        "10.0.0.5:40000".parse().unwrap()
    }

    fn registry() -> Registry {
        Registry::new(Duration::from_secs(60), 10)
    }

    #[test]
    fn register_and_unregister() {
        let mut reg = registry();
        let stats = IcuStats::default();
        let reply = handle_control_line(&mut reg, &stats, "IVU_REGISTER 52000", src(), 0);
        assert_eq!(reply.to_string(), "OK REGISTERED");
        assert!(reg.get(&"10.0.0.5:52000".parse().unwrap()).is_some());

        let reply = handle_control_line(&mut reg, &stats, "IVU_UNREGISTER 52000", src(), 1);
        assert_eq!(reply.to_string(), "OK UNREGISTERED");
        assert!(reg.is_empty());
        let reply = handle_control_line(&mut reg, &stats, "IVU_UNREGISTER 52000", src(), 2);
        assert_eq!(reply.to_string(), "ERR NOT_REGISTERED");
    }

    #[test]
    fn register_is_idempotent() {
        let mut reg = registry();
        let stats = IcuStats::default();
        handle_control_line(&mut reg, &stats, "IVU_REGISTER 52000", src(), 0);
        handle_control_line(&mut reg, &stats, "IVU_REGISTER 52000", src(), 500);
        assert_eq!(reg.len(), 1);
        let r = reg.get(&"10.0.0.5:52000".parse().unwrap()).unwrap();
        assert_eq!((r.registered_at, r.last_ping), (0, 500));
    }

    #[test]
    fn ping_and_status() {
        let mut reg = registry();
        let stats = IcuStats::default();
        assert_eq!(
            handle_control_line(&mut reg, &stats, "IVU_PING 52000", src(), 0).to_string(),
            "ERR NOT_REGISTERED"
        );
        handle_control_line(&mut reg, &stats, "IVU_REGISTER 52000", src(), 0);
        assert_eq!(
            handle_control_line(&mut reg, &stats, "IVU_PING 52000", src(), 10).to_string(),
            "OK PONG"
        );
        stats.lines_in.store(5, Ordering::Relaxed);
        stats.lines_out.store(5, Ordering::Relaxed);
        let status = handle_control_line(&mut reg, &stats, "STATUS", src(), 10);
        assert_eq!(
            status.to_string(),
            "OK STATUS ivus=1 lines_in=5 lines_out=5"
        );
        assert_eq!(ControlReply::parse(&status.to_string()), Some(status));
    }

    #[test]
    fn malformed_requests() {
        let mut reg = registry();
        let stats = IcuStats::default();
        for line in [
            "",
            "HELLO",
            "IVU_REGISTER",
            "IVU_REGISTER abc",
            "IVU_REGISTER 0",
            "IVU_REGISTER 70000",
            "IVU_REGISTER 1 2",
            "STATUS now",
            "ivu_register 5000",
        ] {
            assert_eq!(
                handle_control_line(&mut reg, &stats, line, src(), 0),
                ControlReply::BadRequest,
                "{line:?}"
            );
        }
        assert_eq!(stats.bad_requests.load(Ordering::Relaxed), 9);
        assert!(reg.is_empty());
    }

    #[test]
    fn ttl_expiry_with_mock_clock() {
        let mut reg = registry();
        let a: SocketAddr = "10.0.0.5:1".parse().unwrap();
        let b: SocketAddr = "10.0.0.5:2".parse().unwrap();
        reg.register(a, 0);
        reg.register(b, 0);
        reg.ping(&b, 30_000);
        assert!(reg.sweep(60_000).is_empty());
        assert_eq!(reg.sweep(60_001), vec![a]);
        assert_eq!(reg.endpoints(), vec![b]);
        assert_eq!(reg.sweep(90_001), vec![b]);
    }

    #[test]
    fn consecutive_failures_evict() {
        let mut reg = registry();
        let a: SocketAddr = "10.0.0.5:1".parse().unwrap();
        reg.register(a, 0);
        for _ in 0..9 {
            assert!(!reg.record_send(&a, false));
        }
        // A success resets the streak.
        reg.record_send(&a, true);
        for _ in 0..9 {
            assert!(!reg.record_send(&a, false));
        }
        assert!(reg.record_send(&a, false));
        assert!(reg.is_empty());
    }

    #[test]
    fn kv_config() {
        let mut c = IcuConfig::default();
        c.apply_kv("# comment\ndata-port = 48000\ncontrol_port=48001\nws_port=48080\nvalidate=true\nivu_ttl_secs=5\n")
            .unwrap();
        assert_eq!(c.data_port, 48000);
        assert_eq!(c.control_port, 48001);
        assert_eq!(c.ws_port, Some(48080));
        assert!(c.validate);
        assert_eq!(c.ivu_ttl_secs, 5);
        assert!(matches!(
            c.apply_kv("nonsense"),
            Err(ConfigFileError::Invalid { line_no: 1, .. })
        ));
        assert!(c.apply_kv("data_port=x").is_err());
        assert!(c.apply_kv("colour=blue").is_err());
    }
}
