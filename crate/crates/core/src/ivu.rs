//! Headless visualizer: registers with a control unit, folds every received
//! line into a [`NetworkState`], and can record, replay and snapshot.

use std::fs::File;
use std::io::{self, BufWriter};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::sync::{mpsc, oneshot, watch};

use crate::icu::{ControlReply, PING_INTERVAL};
use crate::journal::{read_journal, EventRecord, JournalError, JournalWriter};
use crate::net_state::{FadeConfig, Millis, NetworkState, SnapshotDiff, SnapshotDocument};
use crate::protocol::{parse_line, LineFramer, ParseError};

pub const TICK_INTERVAL: Duration = Duration::from_millis(100);
const REGISTER_TIMEOUT: Duration = Duration::from_millis(500);
const MAX_BACKOFF: Duration = Duration::from_secs(8);

#[derive(Debug, Clone)]
pub struct IvuOptions {
    pub icu_control: SocketAddr,
    pub bind: IpAddr,
    /// Local UDP port for relayed lines; 0 picks a free one.
    pub local_port: u16,
    pub record: Option<PathBuf>,
    pub dump_on_exit: Option<PathBuf>,
    pub fade: FadeConfig,
    pub ping_interval: Duration,
}

impl IvuOptions {
    pub fn new(icu_control: SocketAddr) -> Self {
        Self {
            icu_control,
            bind: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            local_port: 0,
            record: None,
            dump_on_exit: None,
            fade: FadeConfig::default(),
            ping_interval: PING_INTERVAL,
        }
    }
}

#[derive(Debug, Error)]
pub enum IvuError {
    #[error("cannot bind visualizer socket: {0}")]
    Bind(io::Error),
    #[error("cannot open journal {path}: {source}")]
    Journal { path: PathBuf, source: io::Error },
    #[error("writing snapshot {path}: {source}")]
    Snapshot { path: PathBuf, source: io::Error },
    #[error("visualizer task ended unexpectedly")]
    Gone,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IvuStats {
    pub lines_received: u64,
    pub parse_failures: u64,
    pub journal_records: u64,
}

#[derive(Debug)]
pub struct IvuReport {
    pub snapshot: SnapshotDocument,
    pub stats: IvuStats,
}

enum Request {
    Snapshot(oneshot::Sender<SnapshotDocument>),
    Stats(oneshot::Sender<IvuStats>),
    Stop(oneshot::Sender<IvuReport>),
}

/// Handle to a running headless visualizer. The state itself lives in the
/// receive task; reads go through request messages.
pub struct IvuHandle {
    local_addr: SocketAddr,
    requests: mpsc::Sender<Request>,
    registered: watch::Receiver<bool>,
}

impl IvuHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Wait until the control unit has acknowledged registration.
    pub async fn wait_registered(&mut self) -> Result<(), IvuError> {
        self.registered
            .wait_for(|r| *r)
            .await
            .map(|_| ())
            .map_err(|_| IvuError::Gone)
    }

    pub async fn snapshot(&self) -> Result<SnapshotDocument, IvuError> {
        let (tx, rx) = oneshot::channel();
        self.requests
            .send(Request::Snapshot(tx))
            .await
            .map_err(|_| IvuError::Gone)?;
        rx.await.map_err(|_| IvuError::Gone)
    }

    pub async fn stats(&self) -> Result<IvuStats, IvuError> {
        let (tx, rx) = oneshot::channel();
        self.requests
            .send(Request::Stats(tx))
            .await
            .map_err(|_| IvuError::Gone)?;
        rx.await.map_err(|_| IvuError::Gone)
    }

    /// Unregister, write the exit snapshot if configured, and return the final state.
    pub async fn stop(self) -> Result<IvuReport, IvuError> {
        let (tx, rx) = oneshot::channel();
        self.requests
            .send(Request::Stop(tx))
            .await
            .map_err(|_| IvuError::Gone)?;
        rx.await.map_err(|_| IvuError::Gone)
    }
}

struct Worker {
    options: IvuOptions,
    data: UdpSocket,
    control: UdpSocket,
    state: NetworkState,
    journal: Option<JournalWriter<BufWriter<File>>>,
    started: Instant,
    stats: IvuStats,
    registered: watch::Sender<bool>,
}

pub async fn spawn_headless(options: IvuOptions) -> Result<IvuHandle, IvuError> {
    let data = UdpSocket::bind(SocketAddr::new(options.bind, options.local_port))
        .await
        .map_err(IvuError::Bind)?;
    let control_bind = match options.icu_control {
        SocketAddr::V4(_) => SocketAddr::new(IpAddr::V4(Ipv4Addr::UNSPECIFIED), 0),
        SocketAddr::V6(_) => SocketAddr::new(IpAddr::V6(std::net::Ipv6Addr::UNSPECIFIED), 0),
    };
    let control = UdpSocket::bind(control_bind)
        .await
        .map_err(IvuError::Bind)?;
    let journal = match &options.record {
        Some(path) => Some(
            JournalWriter::create(path).map_err(|source| IvuError::Journal {
                path: path.clone(),
                source,
            })?,
        ),
        None => None,
    };
    let local_addr = data.local_addr().map_err(IvuError::Bind)?;
    let (requests, rx) = mpsc::channel(16);
    let (registered_tx, registered) = watch::channel(false);
    let worker = Worker {
        state: NetworkState::new(options.fade),
        options,
        data,
        control,
        journal,
        started: Instant::now(),
        stats: IvuStats::default(),
        registered: registered_tx,
    };
    tokio::spawn(worker.run(rx));
    Ok(IvuHandle {
        local_addr,
        requests,
        registered,
    })
}

/// Run until `shutdown` resolves, then unregister and return the final state.
pub async fn run_headless(
    options: IvuOptions,
    shutdown: impl std::future::Future<Output = ()>,
) -> Result<IvuReport, IvuError> {
    let handle = spawn_headless(options).await?;
    tracing::info!(local = %handle.local_addr(), "headless visualizer listening");
    shutdown.await;
    handle.stop().await
}

impl Worker {
    fn now(&self) -> Millis {
        self.started.elapsed().as_millis() as Millis
    }

    fn port(&self) -> u16 {
        self.data.local_addr().map(|a| a.port()).unwrap_or_default()
    }

    async fn control_request(&self, verb: &str) -> Option<ControlReply> {
        let request = format!("{verb} {}\n", self.port());
        self.control
            .send_to(request.as_bytes(), self.options.icu_control)
            .await
            .ok()?;
        let mut buf = [0u8; 512];
        let deadline = tokio::time::Instant::now() + REGISTER_TIMEOUT;
        loop {
            let (n, from) = tokio::time::timeout_at(deadline, self.control.recv_from(&mut buf))
                .await
                .ok()?
                .ok()?;
            if from == self.options.icu_control {
                return ControlReply::parse(&String::from_utf8_lossy(&buf[..n]));
            }
        }
    }

    async fn run(mut self, mut requests: mpsc::Receiver<Request>) {
        let mut buf = vec![0u8; 65_535];
        let mut ticker = tokio::time::interval(TICK_INTERVAL);
        let mut backoff = Duration::from_millis(250);
        let mut next_control = tokio::time::Instant::now();
        let mut is_registered = false;

        loop {
            tokio::select! {
                biased;
                req = requests.recv() => match req {
                    Some(Request::Snapshot(tx)) => {
                        self.state.tick(self.now());
                        let _ = tx.send(self.state.snapshot());
                    }
                    Some(Request::Stats(tx)) => {
                        let _ = tx.send(self.stats);
                    }
                    Some(Request::Stop(tx)) => {
                        let report = self.shutdown(is_registered).await;
                        let _ = tx.send(report);
                        return;
                    }
                    None => {
                        self.shutdown(is_registered).await;
                        return;
                    }
                },
                received = self.data.recv_from(&mut buf) => {
                    if let Ok((n, _)) = received {
                        let datagram = buf[..n].to_vec();
                        self.receive_datagram(&datagram);
                    }
                }
                _ = ticker.tick() => {
                    let now = self.now();
                    self.state.tick(now);
                }
                _ = tokio::time::sleep_until(next_control) => {
                    let verb = if is_registered { "IVU_PING" } else { "IVU_REGISTER" };
                    match self.control_request(verb).await {
                        Some(ControlReply::Registered) | Some(ControlReply::Pong) => {
                            if !is_registered {
                                tracing::info!(icu = %self.options.icu_control, "registered with control unit");
                            }
                            is_registered = true;
                            self.registered.send_replace(true);
                            backoff = Duration::from_millis(250);
                            next_control = tokio::time::Instant::now() + self.options.ping_interval;
                        }
                        Some(ControlReply::NotRegistered) => {
                            tracing::warn!("control unit forgot this visualizer, registering again");
                            is_registered = false;
                            self.registered.send_replace(false);
                            next_control = tokio::time::Instant::now();
                        }
                        other => {
                            tracing::warn!(reply = ?other, retry_in = ?backoff, "no answer from control unit");
                            if verb == "IVU_REGISTER" {
                                next_control = tokio::time::Instant::now() + backoff;
                                backoff = (backoff * 2).min(MAX_BACKOFF);
                            } else {
                                next_control = tokio::time::Instant::now() + self.options.ping_interval;
                            }
                        }
                    }
                }
            }
        }
    }

    fn receive_datagram(&mut self, datagram: &[u8]) {
        let mut framer = LineFramer::new();
        let frames = framer.push(datagram);
        let lines = frames.lines.into_iter().chain(framer.finish());
        for line in lines {
            let text = String::from_utf8_lossy(&line).into_owned();
            self.receive_line(&text);
        }
    }

    fn receive_line(&mut self, line: &str) {
        let now = self.now();
        if let Some(journal) = &mut self.journal {
            if let Err(e) = journal.append(now, line) {
                tracing::error!(error = %e, "journal write failed, recording stopped");
                self.journal = None;
            } else {
                self.stats.journal_records += 1;
            }
        }
        match parse_line(line) {
            Ok(cmd) => {
                self.stats.lines_received += 1;
                self.state.apply(&cmd, now);
            }
            Err(ParseError::EmptyLine) => {}
            Err(e) => {
                self.stats.lines_received += 1;
                self.stats.parse_failures += 1;
                tracing::debug!(line, error = %e, "skipping unparseable line");
            }
        }
    }

    async fn shutdown(&mut self, is_registered: bool) -> IvuReport {
        if is_registered {
            match self.control_request("IVU_UNREGISTER").await {
                Some(ControlReply::Unregistered) => {
                    tracing::info!("unregistered from control unit")
                }
                other => tracing::warn!(reply = ?other, "unregister not acknowledged"),
            }
        }
        self.registered.send_replace(false);
        self.state.tick(self.now());
        let snapshot = self.state.snapshot();
        if let Some(path) = &self.options.dump_on_exit {
            if let Err(e) = dump_snapshot(&snapshot, path) {
                tracing::error!(error = %e, path = %path.display(), "cannot write exit snapshot");
            }
        }
        IvuReport {
            snapshot,
            stats: self.stats,
        }
    }
}

/// Fold a journal into a fresh state, using each record's offset as the clock.
pub fn fold_journal(records: &[EventRecord], fade: FadeConfig) -> (NetworkState, IvuStats) {
    let mut state = NetworkState::new(fade);
    let mut stats = IvuStats::default();
    for record in records {
        state.tick(record.t);
        match parse_line(&record.line) {
            Ok(cmd) => {
                stats.lines_received += 1;
                state.apply(&cmd, record.t);
            }
            Err(ParseError::EmptyLine) => {}
            Err(_) => {
                stats.lines_received += 1;
                stats.parse_failures += 1;
            }
        }
    }
    (state, stats)
}

pub fn dump_snapshot(snapshot: &SnapshotDocument, path: impl AsRef<Path>) -> Result<(), IvuError> {
    let path = path.as_ref();
    std::fs::write(path, snapshot.to_json_string() + "\n").map_err(|source| IvuError::Snapshot {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Error)]
pub enum SnapshotFileError {
    #[error("reading snapshot: {0}")]
    Io(#[from] io::Error),
    #[error("parsing snapshot: {0}")]
    Json(#[from] serde_json::Error),
}

/// Compare against a stored snapshot, ignoring time-dependent fields.
/// An empty diff means the states match.
pub fn assert_snapshot(
    actual: &SnapshotDocument,
    expected_path: impl AsRef<Path>,
) -> Result<Vec<SnapshotDiff>, SnapshotFileError> {
    let expected = SnapshotDocument::from_json_str(&std::fs::read_to_string(expected_path)?)?;
    Ok(expected.diff_ignoring_time(actual))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplaySpeed {
    Factor(f64),
    Instant,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("replay speed must be a positive number")]
    Speed,
    #[error("udp: {0}")]
    Io(#[from] io::Error),
}

/// Largest payload packed into one datagram by an instant replay.
const INSTANT_DATAGRAM_BUDGET: usize = 1200;

/// Send every journal line to `target` over UDP, honoring recorded offsets
/// divided by the speed factor. Instant replay packs consecutive lines into
/// shared datagrams so a burst does not overrun the receiver.
pub fn replay_records(
    records: &[EventRecord],
    target: SocketAddr,
    speed: ReplaySpeed,
) -> Result<usize, ReplayError> {
    if let ReplaySpeed::Factor(f) = speed {
        if !(f.is_finite() && f > 0.0) {
            return Err(ReplayError::Speed);
        }
    }
    let bind: SocketAddr = if target.is_ipv4() {
        (Ipv4Addr::UNSPECIFIED, 0).into()
    } else {
        (std::net::Ipv6Addr::UNSPECIFIED, 0).into()
    };
    let socket = std::net::UdpSocket::bind(bind)?;
    let started = Instant::now();
    let mut pending: Vec<u8> = Vec::new();
    for record in records {
        let mut line = record.line.clone().into_bytes();
        line.push(b'\n');
        match speed {
            ReplaySpeed::Factor(f) => {
                let due = started + Duration::from_secs_f64(record.t as f64 / 1000.0 / f);
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
                socket.send_to(&line, target)?;
            }
            ReplaySpeed::Instant => {
                if !pending.is_empty() && pending.len() + line.len() > INSTANT_DATAGRAM_BUDGET {
                    socket.send_to(&pending, target)?;
                    pending.clear();
                }
                pending.extend_from_slice(&line);
            }
        }
    }
    if !pending.is_empty() {
        socket.send_to(&pending, target)?;
    }
    Ok(records.len())
}

pub fn replay(
    journal: impl AsRef<Path>,
    target: SocketAddr,
    speed: ReplaySpeed,
) -> Result<usize, ReplayError> {
    let records = read_journal(journal)?;
    replay_records(&records, target, speed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: Millis, line: &str) -> EventRecord {
        EventRecord {
            t,
            line: line.into(),
        }
    }

    #[test]
    fn fold_counts_failures_and_builds_state() {
        let (state, stats) = fold_journal(
            &[
                rec(0, "heartBeat 0x00 0.5 0.5"),
                rec(5, "bogus 1 2"),
                rec(9, "setText 0x00 hi"),
            ],
            FadeConfig::default(),
        );
        assert_eq!(state.node_count(), 1);
        assert_eq!(stats.parse_failures, 1);
        assert_eq!(stats.lines_received, 3);
    }

    #[test]
    fn snapshot_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        let (state, _) = fold_journal(
            &[
                rec(0, "heartBeat 0x00 0.2 0.2"),
                rec(0, "heartBeat 0x01 0.8 0.2"),
                rec(0, "addNeighbor 0x00 0x01"),
                rec(0, "setBadge 0x00 1 7"),
            ],
            FadeConfig::default(),
        );
        let snap = state.snapshot();
        dump_snapshot(&snap, &path).unwrap();
        assert!(assert_snapshot(&snap, &path).unwrap().is_empty());

        let (other, _) = fold_journal(&[rec(0, "heartBeat 0x00 0.2 0.2")], FadeConfig::default());
        let diff = assert_snapshot(&other.snapshot(), &path).unwrap();
        assert!(!diff.is_empty());
        assert!(diff.iter().any(|d| d.path.starts_with("$.nodes[1]")));
    }

    #[test]
    fn bad_replay_speed() {
        let target: SocketAddr = "127.0.0.1:9".parse().unwrap();
        assert!(matches!(
            replay_records(&[], target, ReplaySpeed::Factor(0.0)),
            Err(ReplayError::Speed)
        ));
    }
}
