//! Discrete-event simulation of a grid testbed running the neighbourhood
//! discovery and reactive flooding firmware.
//!
//! Every node runs three things:
//!
//! * a hello timer: at boot and then every `hello_period + U(0, hello_jitter_max)`
//!   the node clears its neighbour list and broadcasts `Hello` with its cell;
//! * a heartbeat timer that reports liveness to the control unit;
//! * a receive loop: the node listens for `listen_base + U(0, listen_jitter_max)`.
//!   If nothing arrived it starts over. Otherwise it keeps reading until
//!   `extra_read_window` passes with no new arrival, then processes every
//!   stored packet and starts over. Replies therefore go out at least
//!   `extra_read_window` after the packet they answer.
//!
//! Radio transmissions are instantaneous. A broadcast reaches every other node
//! within `radio_range` (Chebyshev distance in cells), each delivery dropped
//! independently with `loss_probability`. With `deaf_while_busy`, a node that
//! is transmitting or processing (for `busy_window` after it starts) drops
//! whatever arrives in that window.
//!
//! All visual feedback leaves the simulation as protocol lines stamped with
//! virtual time; [`run_live`] paces them against the wall clock and sends
//! them to a control unit over UDP.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet, VecDeque};
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::journal::EventRecord;
use crate::net_state::Millis;
use crate::protocol::{Command, NodeId, Position, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub col: u32,
    pub row: u32,
}

impl Cell {
    pub const fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }
}

pub fn manhattan(a: Cell, b: Cell) -> u32 {
    a.col.abs_diff(b.col) + a.row.abs_diff(b.row)
}

pub fn chebyshev(a: Cell, b: Cell) -> u32 {
    a.col.abs_diff(b.col).max(a.row.abs_diff(b.row))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub grid_width: u32,
    pub grid_height: u32,
    pub hello_period_ms: Millis,
    pub hello_jitter_max_ms: Millis,
    pub listen_base_ms: Millis,
    pub listen_jitter_max_ms: Millis,
    pub extra_read_window_ms: Millis,
    /// How long a node stays deaf after it starts transmitting or processing.
    /// Only observable with `deaf_while_busy`.
    pub busy_window_ms: Millis,
    pub heartbeat_period_ms: Millis,
    pub neighbor_distance_max: u32,
    /// Chebyshev reach in cells; `None` reaches the whole grid.
    pub radio_range: Option<u32>,
    pub loss_probability: f64,
    pub deaf_while_busy: bool,
    pub accel_threshold: f64,
    pub dedup_capacity: usize,
    pub seed: u64,
    /// Explicit node ids in row-major order. Defaults to `0x00`, `0x01`, ...
    pub node_ids: Option<Vec<String>>,
    pub icu_endpoint: Option<SocketAddr>,
    /// Wall seconds per virtual second. 0 runs as fast as possible.
    pub time_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid_width: 4,
            grid_height: 4,
            hello_period_ms: 15_000,
            hello_jitter_max_ms: 5_000,
            listen_base_ms: 1_000,
            listen_jitter_max_ms: 200,
            extra_read_window_ms: 1_000,
            busy_window_ms: 100,
            heartbeat_period_ms: 5_000,
            neighbor_distance_max: 2,
            radio_range: None,
            loss_probability: 0.0,
            deaf_while_busy: false,
            accel_threshold: 1.0,
            dedup_capacity: 32,
            seed: 0,
            node_ids: None,
            icu_endpoint: None,
            time_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("grid dimensions must be at least 1x1, got {0}x{1}")]
    GridSize(u32, u32),
    #[error("loss_probability {0} is outside [0, 1]")]
    LossProbability(f64),
    #[error("dedup_capacity must be at least 1")]
    DedupCapacity,
    #[error("time_scale {0} must be a finite non-negative number")]
    TimeScale(f64),
    #[error("accel_threshold {0} must be a finite non-negative number")]
    AccelThreshold(f64),
    #[error("{expected} node ids required, {got} given")]
    NodeIdCount { expected: usize, got: usize },
    #[error("invalid node id `{0}`")]
    InvalidNodeId(String),
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

impl SimConfig {
    pub fn node_count(&self) -> usize {
        self.grid_width as usize * self.grid_height as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(ConfigError::GridSize(self.grid_width, self.grid_height));
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(ConfigError::LossProbability(self.loss_probability));
        }
        if self.dedup_capacity == 0 {
            return Err(ConfigError::DedupCapacity);
        }
        if !self.time_scale.is_finite() || self.time_scale < 0.0 {
            return Err(ConfigError::TimeScale(self.time_scale));
        }
        if !self.accel_threshold.is_finite() || self.accel_threshold < 0.0 {
            return Err(ConfigError::AccelThreshold(self.accel_threshold));
        }
        self.resolve_ids().map(|_| ())
    }

    fn resolve_ids(&self) -> Result<Vec<NodeId>, ConfigError> {
        let n = self.node_count();
        let raw: Vec<String> = match &self.node_ids {
            Some(ids) => {
                if ids.len() != n {
                    return Err(ConfigError::NodeIdCount {
                        expected: n,
                        got: ids.len(),
                    });
                }
                ids.clone()
            }
            None => (0..n).map(default_node_id).collect(),
        };
        let mut seen = HashSet::new();
        raw.into_iter()
            .map(|s| {
                if !seen.insert(s.clone()) {
                    return Err(ConfigError::DuplicateId(s));
                }
                NodeId::new(s.clone()).map_err(|_| ConfigError::InvalidNodeId(s))
            })
            .collect()
    }

    /// Cell centre mapped into `[0, 1]²`.
    pub fn position_of(&self, cell: Cell) -> Position {
        Position {
            x: (f64::from(cell.col) + 0.5) / f64::from(self.grid_width),
            y: (f64::from(cell.row) + 0.5) / f64::from(self.grid_height),
        }
    }
}

/// Sequential hex id in row-major order: `0x00`, `0x01`, ... `0x30`.
pub fn default_node_id(index: usize) -> String {
    format!("0x{index:02x}")
}

/// Labels used on `sendPacket` lines.
pub const HELLO_TOO_LABEL: &str = "Hello_too";
pub const FORWARD_LABEL: &str = "forward";

#[derive(Debug, Clone, PartialEq)]
pub enum RadioMsg {
    Hello {
        from: usize,
        cell: Cell,
    },
    HelloToo {
        from: usize,
        to: usize,
    },
    Forward {
        origin: usize,
        seq: u64,
        from: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Initial listen period of a loop iteration.
    Listening,
    /// Data arrived; waiting for a quiet read window.
    Reading,
}

#[derive(Debug)]
pub struct SimNode {
    pub id: NodeId,
    pub cell: Cell,
    pub neighbors: BTreeSet<usize>,
    dedup: VecDeque<(usize, u64)>,
    pub accel_baseline: f64,
    next_seq: u64,
    rng: ChaCha8Rng,
    heartbeats_sent: u64,
    inbox: Vec<RadioMsg>,
    phase: Phase,
    wake_generation: u64,
    busy_until: Option<Millis>,
    pub color: Rgb,
    pub forwards_sent: u64,
}

impl SimNode {
    pub fn dedup_len(&self) -> usize {
        self.dedup.len()
    }

    pub fn has_seen(&self, origin: usize, seq: u64) -> bool {
        self.dedup.contains(&(origin, seq))
    }

    fn remember(&mut self, key: (usize, u64), capacity: usize) {
        while self.dedup.len() >= capacity {
            self.dedup.pop_front();
        }
        self.dedup.push_back(key);
    }

    fn is_deaf_at(&self, now: Millis) -> bool {
        self.busy_until.is_some_and(|until| now < until)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Event {
    Boot(usize),
    HelloRound(usize),
    Heartbeat(usize),
    Arrive { to: usize, msg: RadioMsg },
    Wake { node: usize, generation: u64 },
    Shake { node: usize, value: f64 },
}

#[derive(Debug)]
struct Scheduled {
    at: Millis,
    order: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.order).cmp(&(other.at, other.order))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub hello_broadcasts: u64,
    pub hello_too_sent: u64,
    pub forward_transmissions: u64,
    pub deliveries: u64,
    pub dropped_by_loss: u64,
    pub dropped_while_deaf: u64,
    pub duplicate_forwards_dropped: u64,
}

pub struct Simulation {
    config: SimConfig,
    nodes: Vec<SimNode>,
    index: BTreeMap<NodeId, usize>,
    queue: BinaryHeap<Reverse<Scheduled>>,
    order: u64,
    now: Millis,
    channel_rng: ChaCha8Rng,
    emitted: Vec<EventRecord>,
    stats: SimStats,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let ids = config.resolve_ids()?;
        let width = config.grid_width as usize;
        let nodes: Vec<SimNode> = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64);
                SimNode {
                    id,
                    cell: Cell::new((i % width) as u32, (i / width) as u32),
                    neighbors: BTreeSet::new(),
                    dedup: VecDeque::with_capacity(config.dedup_capacity),
                    accel_baseline: 0.0,
                    next_seq: 1,
                    rng,
                    heartbeats_sent: 0,
                    inbox: Vec::new(),
                    phase: Phase::Listening,
                    wake_generation: 0,
                    busy_until: None,
                    color: Rgb::WHITE,
                    forwards_sent: 0,
                }
            })
            .collect();
        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        let mut channel_rng = ChaCha8Rng::seed_from_u64(config.seed);
        channel_rng.set_stream(u64::MAX);

        let mut sim = Self {
            config,
            nodes,
            index,
            queue: BinaryHeap::new(),
            order: 0,
            now: 0,
            channel_rng,
            emitted: Vec::new(),
            stats: SimStats::default(),
        };
        // Power-on skew so nodes do not all transmit in the same instant.
        for i in 0..sim.nodes.len() {
            let skew = sim.jitter(i, sim.config.listen_jitter_max_ms);
            sim.schedule(skew, Event::Boot(i));
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn nodes(&self) -> &[SimNode] {
        &self.nodes
    }

    pub fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node(&self, id: &NodeId) -> Option<&SimNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    /// Current neighbour sets keyed by node id.
    pub fn neighbor_sets(&self) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        self.nodes
            .iter()
            .map(|n| {
                let set = n
                    .neighbors
                    .iter()
                    .map(|&j| self.nodes[j].id.clone())
                    .collect();
                (n.id.clone(), set)
            })
            .collect()
    }

    /// Inject an accelerometer reading at virtual time `at`.
    pub fn schedule_shake(
        &mut self,
        at: Millis,
        id: &NodeId,
        value: f64,
    ) -> Result<(), ConfigError> {
        let node = self
            .index_of(id)
            .ok_or_else(|| ConfigError::UnknownNode(id.to_string()))?;
        self.schedule(at.max(self.now), Event::Shake { node, value });
        Ok(())
    }

    /// No radio traffic is in flight and no node has unprocessed packets.
    pub fn radio_idle(&self) -> bool {
        self.nodes.iter().all(|n| n.inbox.is_empty())
            && !self
                .queue
                .iter()
                .any(|Reverse(s)| matches!(s.event, Event::Arrive { .. }))
    }

    pub fn next_event_time(&self) -> Option<Millis> {
        self.queue.peek().map(|Reverse(s)| s.at)
    }

    /// Process every event scheduled at or before `until`, then set the clock to `until`.
    pub fn run_until(&mut self, until: Millis) {
        while let Some(Reverse(next)) = self.queue.peek() {
            if next.at > until {
                break;
            }
            let Reverse(next) = self.queue.pop().expect("peeked");
            self.now = next.at;
            self.handle(next.event);
        }
        self.now = self.now.max(until);
    }

    pub fn drain_emissions(&mut self) -> Vec<EventRecord> {
        std::mem::take(&mut self.emitted)
    }

    fn schedule(&mut self, at: Millis, event: Event) {
        self.order += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            order: self.order,
            event,
        }));
    }

    fn jitter(&mut self, node: usize, max: Millis) -> Millis {
        self.nodes[node].rng.gen_range(0..=max)
    }

    fn emit(&mut self, cmd: Command) {
        self.emitted.push(EventRecord {
            t: self.now,
            line: cmd.to_string(),
        });
    }

    fn id(&self, node: usize) -> NodeId {
        self.nodes[node].id.clone()
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Boot(i) => {
                self.heartbeat(i);
                self.hello_round(i);
                self.restart_loop(i);
            }
            Event::HelloRound(i) => self.hello_round(i),
            Event::Heartbeat(i) => self.heartbeat(i),
            Event::Arrive { to, msg } => self.arrive(to, msg),
            Event::Wake { node, generation } => {
                if generation == self.nodes[node].wake_generation {
                    self.wake(node);
                }
            }
            Event::Shake { node, value } => self.trigger_event(node, value),
        }
    }

    fn heartbeat(&mut self, i: usize) {
        let first = self.nodes[i].heartbeats_sent == 0;
        self.nodes[i].heartbeats_sent += 1;
        let position = first.then(|| self.config.position_of(self.nodes[i].cell));
        self.emit(Command::HeartBeat {
            id: self.id(i),
            position,
        });
        let at = self.now + self.config.heartbeat_period_ms;
        self.schedule(at, Event::Heartbeat(i));
    }

    fn hello_round(&mut self, i: usize) {
        self.nodes[i].neighbors.clear();
        self.emit(Command::ResetNeighbors { id: self.id(i) });
        self.stats.hello_broadcasts += 1;
        let cell = self.nodes[i].cell;
        self.mark_busy(i);
        self.broadcast(i, RadioMsg::Hello { from: i, cell });
        let gap = self.config.hello_period_ms + self.jitter(i, self.config.hello_jitter_max_ms);
        self.schedule(self.now + gap, Event::HelloRound(i));
    }

    fn trigger_event(&mut self, i: usize, reading: f64) {
        let node = &mut self.nodes[i];
        let changed = (reading - node.accel_baseline).abs() > self.config.accel_threshold;
        node.accel_baseline = reading;
        if !changed {
            return;
        }
        let seq = node.next_seq;
        node.next_seq += 1;
        node.remember((i, seq), self.config.dedup_capacity);
        node.color = Rgb::RED;
        self.emit(Command::ChangeColor {
            id: self.id(i),
            color: Rgb::RED,
        });
        self.mark_busy(i);
        self.send_forward(i, i, seq);
    }

    fn send_forward(&mut self, i: usize, origin: usize, seq: u64) {
        self.stats.forward_transmissions += 1;
        self.nodes[i].forwards_sent += 1;
        let targets: Vec<usize> = self.nodes[i].neighbors.iter().copied().collect();
        for to in targets {
            if self.in_range(i, to) {
                self.transmit(
                    to,
                    RadioMsg::Forward {
                        origin,
                        seq,
                        from: i,
                    },
                );
            }
        }
    }

    fn in_range(&self, a: usize, b: usize) -> bool {
        self.config
            .radio_range
            .is_none_or(|r| chebyshev(self.nodes[a].cell, self.nodes[b].cell) <= r)
    }

    fn broadcast(&mut self, from: usize, msg: RadioMsg) {
        for to in 0..self.nodes.len() {
            if to != from && self.in_range(from, to) {
                self.transmit(to, msg.clone());
            }
        }
    }

    fn transmit(&mut self, to: usize, msg: RadioMsg) {
        if self.config.loss_probability > 0.0
            && self.channel_rng.gen_bool(self.config.loss_probability)
        {
            self.stats.dropped_by_loss += 1;
            return;
        }
        self.schedule(self.now, Event::Arrive { to, msg });
    }

    fn mark_busy(&mut self, i: usize) {
        self.nodes[i].busy_until = Some(self.now + self.config.busy_window_ms);
    }

    fn arrive(&mut self, i: usize, msg: RadioMsg) {
        if self.config.deaf_while_busy && self.nodes[i].is_deaf_at(self.now) {
            self.stats.dropped_while_deaf += 1;
            return;
        }
        self.stats.deliveries += 1;
        let node = &mut self.nodes[i];
        node.inbox.push(msg);
        if node.phase == Phase::Reading {
            let at = self.now + self.config.extra_read_window_ms;
            self.schedule_wake(i, at);
        }
    }

    fn schedule_wake(&mut self, i: usize, at: Millis) {
        let node = &mut self.nodes[i];
        node.wake_generation += 1;
        let generation = node.wake_generation;
        self.schedule(
            at,
            Event::Wake {
                node: i,
                generation,
            },
        );
    }

    fn restart_loop(&mut self, i: usize) {
        self.nodes[i].phase = Phase::Listening;
        let wait = self.config.listen_base_ms + self.jitter(i, self.config.listen_jitter_max_ms);
        self.schedule_wake(i, self.now + wait);
    }

    fn wake(&mut self, i: usize) {
        match self.nodes[i].phase {
            Phase::Listening if self.nodes[i].inbox.is_empty() => self.restart_loop(i),
            Phase::Listening => {
                self.nodes[i].phase = Phase::Reading;
                let at = self.now + self.config.extra_read_window_ms;
                self.schedule_wake(i, at);
            }
            Phase::Reading => {
                let inbox = std::mem::take(&mut self.nodes[i].inbox);
                if !inbox.is_empty() {
                    self.mark_busy(i);
                }
                for msg in inbox {
                    self.on_receive(i, msg);
                }
                self.restart_loop(i);
            }
        }
    }

    fn on_receive(&mut self, i: usize, msg: RadioMsg) {
        match msg {
            RadioMsg::Hello { from, cell } => {
                if manhattan(self.nodes[i].cell, cell) <= self.config.neighbor_distance_max
                    && self.in_range(i, from)
                {
                    self.stats.hello_too_sent += 1;
                    self.transmit(from, RadioMsg::HelloToo { from: i, to: from });
                    self.emit(Command::SendPacket {
                        sender: self.id(i),
                        receiver: self.id(from),
                        label: Some(HELLO_TOO_LABEL.into()),
                    });
                }
            }
            RadioMsg::HelloToo { from, .. } => {
                self.nodes[i].neighbors.insert(from);
                self.emit(Command::AddNeighbor {
                    id: self.id(i),
                    neighbor: self.id(from),
                });
            }
            RadioMsg::Forward { origin, seq, from } => {
                self.emit(Command::SendPacket {
                    sender: self.id(from),
                    receiver: self.id(i),
                    label: Some(FORWARD_LABEL.into()),
                });
                if self.nodes[i].has_seen(origin, seq) {
                    self.stats.duplicate_forwards_dropped += 1;
                    return;
                }
                self.nodes[i].remember((origin, seq), self.config.dedup_capacity);
                if i != origin {
                    self.nodes[i].color = Rgb::BLUE;
                    self.emit(Command::ChangeColor {
                        id: self.id(i),
                        color: Rgb::BLUE,
                    });
                }
                self.send_forward(i, origin, seq);
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script line {line_no}: {reason}")]
    Syntax { line_no: usize, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Injected events for a scripted run.
///
/// ```text
/// # comment
/// at 6000 shake 0x00 2.5
/// stop 20000
/// ```
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Script {
    pub shakes: Vec<(Millis, NodeId, f64)>,
    pub stop: Option<Millis>,
}

/// Run length when a script has no `stop` directive.
pub const DEFAULT_STOP_MS: Millis = 60_000;

impl Script {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut script = Script::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| ScriptError::Syntax {
                line_no,
                reason: reason.to_string(),
            };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                ["at", ms, "shake", node, value] => {
                    let ms = ms.parse().map_err(|_| err("bad time"))?;
                    let node = NodeId::new(*node).map_err(|_| err("bad node id"))?;
                    let value: f64 = value.parse().map_err(|_| err("bad value"))?;
                    if !value.is_finite() {
                        return Err(err("bad value"));
                    }
                    script.shakes.push((ms, node, value));
                }
                ["stop", ms] => {
                    if script.stop.is_some() {
                        return Err(err("duplicate stop"));
                    }
                    script.stop = Some(ms.parse().map_err(|_| err("bad time"))?);
                }
                _ => {
                    return Err(err(
                        "expected `at <ms> shake <node> <value>` or `stop <ms>`",
                    ))
                }
            }
        }
        Ok(script)
    }

    pub fn stop_at(&self) -> Millis {
        self.stop.unwrap_or(DEFAULT_STOP_MS)
    }
}

#[derive(Debug)]
pub struct ScriptResult {
    pub records: Vec<EventRecord>,
    pub stats: SimStats,
    pub neighbors: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

/// Run to the script's stop time in virtual time and return every emitted line.
pub fn run_scripted(config: SimConfig, script: &Script) -> Result<ScriptResult, ScriptError> {
    let mut sim = Simulation::new(config)?;
    for (at, node, value) in &script.shakes {
        sim.schedule_shake(*at, node, *value)?;
    }
    sim.run_until(script.stop_at());
    Ok(ScriptResult {
        records: sim.drain_emissions(),
        stats: sim.stats(),
        neighbors: sim.neighbor_sets(),
    })
}

#[derive(Debug, Error)]
pub enum LiveError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no control unit endpoint configured")]
    NoEndpoint,
    #[error("udp: {0}")]
    Io(#[from] std::io::Error),
}

/// Run against the wall clock, sending every emitted line to the control
/// unit as one UDP datagram. Stops at `stop` virtual time (if any) or when
/// `shutdown` is raised.
pub fn run_live(
    config: SimConfig,
    script: &Script,
    stop: Option<Millis>,
    shutdown: &AtomicBool,
) -> Result<SimStats, LiveError> {
    let endpoint = config.icu_endpoint.ok_or(LiveError::NoEndpoint)?;
    let bind: SocketAddr = if endpoint.is_ipv4() {
        "0.0.0.0:0".parse().expect("literal")
    } else {
        "[::]:0".parse().expect("literal")
    };
    let socket = UdpSocket::bind(bind)?;
    let scale = config.time_scale;
    let mut sim = Simulation::new(config)?;
    for (at, node, value) in &script.shakes {
        sim.schedule_shake(*at, node, *value)?;
    }
    let started = Instant::now();
    tracing::info!(nodes = sim.nodes().len(), %endpoint, "simulation running");

    while !shutdown.load(Ordering::Relaxed) {
        let Some(next) = sim.next_event_time() else {
            break;
        };
        if stop.is_some_and(|s| next > s) {
            break;
        }
        if scale > 0.0 {
            let due = started + Duration::from_secs_f64(next as f64 / 1000.0 * scale);
            // Sleep in short slices so shutdown stays responsive.
            loop {
                let now = Instant::now();
                if now >= due || shutdown.load(Ordering::Relaxed) {
                    break;
                }
                std::thread::sleep((due - now).min(Duration::from_millis(50)));
            }
        }
        sim.run_until(next);
        for record in sim.drain_emissions() {
            let mut datagram = record.line.into_bytes();
            datagram.push(b'\n');
            if let Err(e) = socket.send_to(&datagram, endpoint) {
                tracing::warn!(error = %e, "send to control unit failed");
            }
        }
    }
    Ok(sim.stats())
}
