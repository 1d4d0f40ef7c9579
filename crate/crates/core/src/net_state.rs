//! Visualizer-side network model.
//!
//! Commands are folded into a [`NetworkState`] together with the time they
//! were received. Fading is never destructive: whether a node is inactive or
//! a link is stale is derived at read time from its last timestamp, so a
//! renderer can ignore fading entirely.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::protocol::{Command, NodeId, Position, Rgb};

/// Milliseconds on the caller's clock. The wire protocol carries no time.
pub type Millis = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadeConfig {
    pub node_fade_ms: Millis,
    pub link_fade_ms: Millis,
    pub pulse_duration_ms: Millis,
    pub packet_duration_ms: Millis,
    /// Opacity of a deactivated node.
    pub inactive_alpha: f64,
}

impl Default for FadeConfig {
    fn default() -> Self {
        Self {
            node_fade_ms: 30_000,
            link_fade_ms: 30_000,
            pulse_duration_ms: 800,
            packet_duration_ms: 600,
            inactive_alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FadeConfigError {
    #[error("{0} must be greater than zero")]
    ZeroDuration(&'static str),
    #[error("inactive_alpha {0} is outside [0, 1]")]
    Alpha(f64),
}

impl FadeConfig {
    pub fn validate(&self) -> Result<(), FadeConfigError> {
        for (name, v) in [
            ("node_fade", self.node_fade_ms),
            ("link_fade", self.link_fade_ms),
            ("pulse_duration", self.pulse_duration_ms),
            ("packet_duration", self.packet_duration_ms),
        ] {
            if v == 0 {
                return Err(FadeConfigError::ZeroDuration(name));
            }
        }
        if !(0.0..=1.0).contains(&self.inactive_alpha) {
            return Err(FadeConfigError::Alpha(self.inactive_alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeView {
    pub id: NodeId,
    pub position: Position,
    pub color: Rgb,
    pub activated: bool,
    pub text: String,
    /// Index 0 is the top-left badge, 1 the top-right one.
    pub badges: [String; 2],
    /// Neighbor id -> time the link was last confirmed.
    pub neighbors: BTreeMap<NodeId, Millis>,
    pub last_activity: Millis,
}

impl NodeView {
    fn new(id: NodeId, position: Position, now: Millis) -> Self {
        Self {
            id,
            position,
            color: Rgb::WHITE,
            activated: true,
            text: String::new(),
            badges: Default::default(),
            neighbors: BTreeMap::new(),
            last_activity: now,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnimationKind {
    Pulse {
        node: NodeId,
    },
    PacketFlight {
        sender: NodeId,
        receiver: NodeId,
        label: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Animation {
    pub kind: AnimationKind,
    pub started: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WarningKind {
    /// A command referenced a node that has not been introduced yet.
    UnknownNode,
    /// `addNeighbor` naming the node itself.
    SelfLink,
}

impl WarningKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WarningKind::UnknownNode => "unknown_node",
            WarningKind::SelfLink => "self_link",
        }
    }
}

/// What a single [`NetworkState::apply`] changed.
#[derive(Debug, Clone, PartialEq)]
pub enum StateEvent {
    NodeCreated(NodeId),
    NodeMoved(NodeId),
    NodeUpdated(NodeId),
    NeighborsReset(NodeId),
    PulseStarted(NodeId),
    PacketStarted { sender: NodeId, receiver: NodeId },
    Warning { kind: WarningKind, node: NodeId },
}

#[derive(Debug, Clone, Default)]
pub struct NetworkState {
    nodes: BTreeMap<NodeId, NodeView>,
    animations: Vec<Animation>,
    config: FadeConfig,
    warnings: BTreeMap<WarningKind, u64>,
    now: Millis,
}

impl NetworkState {
    pub fn new(config: FadeConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn config(&self) -> &FadeConfig {
        &self.config
    }

    pub fn node(&self, id: &NodeId) -> Option<&NodeView> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeView> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn animations(&self) -> &[Animation] {
        &self.animations
    }

    pub fn warnings(&self, kind: WarningKind) -> u64 {
        self.warnings.get(&kind).copied().unwrap_or(0)
    }

    /// Latest time seen by `apply` or `tick`.
    pub fn now(&self) -> Millis {
        self.now
    }

    fn advance(&mut self, now: Millis) {
        // Tolerate a caller clock stepping backwards rather than violating
        // `last_activity <= now`.
        self.now = self.now.max(now);
    }

    fn warn(&mut self, kind: WarningKind, node: &NodeId, events: &mut Vec<StateEvent>) {
        *self.warnings.entry(kind).or_default() += 1;
        events.push(StateEvent::Warning {
            kind,
            node: node.clone(),
        });
    }

    pub fn apply(&mut self, cmd: &Command, now: Millis) -> Vec<StateEvent> {
        self.advance(now);
        let now = self.now;
        let mut events = Vec::new();

        match cmd {
            Command::HeartBeat { id, position } => {
                match (self.nodes.get_mut(id), position) {
                    (Some(node), pos) => {
                        if let Some(pos) = pos {
                            node.position = *pos;
                            events.push(StateEvent::NodeMoved(id.clone()));
                        }
                        node.last_activity = now;
                    }
                    (None, Some(pos)) => {
                        self.nodes
                            .insert(id.clone(), NodeView::new(id.clone(), *pos, now));
                        events.push(StateEvent::NodeCreated(id.clone()));
                    }
                    (None, None) => {
                        self.warn(WarningKind::UnknownNode, id, &mut events);
                        return events;
                    }
                }
                self.animations.push(Animation {
                    kind: AnimationKind::Pulse { node: id.clone() },
                    started: now,
                });
                events.push(StateEvent::PulseStarted(id.clone()));
            }
            Command::SendPacket {
                sender,
                receiver,
                label,
            } => {
                let sender_known = self.touch(sender, now);
                if !sender_known {
                    self.warn(WarningKind::UnknownNode, sender, &mut events);
                }
                if !self.touch(receiver, now) {
                    self.warn(WarningKind::UnknownNode, receiver, &mut events);
                }
                if sender_known {
                    self.animations.push(Animation {
                        kind: AnimationKind::PacketFlight {
                            sender: sender.clone(),
                            receiver: receiver.clone(),
                            label: label.clone(),
                        },
                        started: now,
                    });
                    events.push(StateEvent::PacketStarted {
                        sender: sender.clone(),
                        receiver: receiver.clone(),
                    });
                }
            }
            Command::AddNeighbor { id, neighbor } if id == neighbor => {
                self.warn(WarningKind::SelfLink, id, &mut events);
            }
            other => {
                let id = other.subject();
                let Some(node) = self.nodes.get_mut(id) else {
                    self.warn(WarningKind::UnknownNode, id, &mut events);
                    return events;
                };
                node.last_activity = now;
                match other {
                    Command::ChangeColor { color, .. } => node.color = *color,
                    Command::ActivateNode { .. } => node.activated = true,
                    Command::DisactivateNode { .. } => node.activated = false,
                    Command::SetText { text, .. } => node.text = text.clone(),
                    Command::SetBadge { slot, text, .. } => {
                        node.badges[slot.index()] = text.clone()
                    }
                    Command::AddNeighbor { neighbor, .. } => {
                        node.neighbors.insert(neighbor.clone(), now);
                    }
                    Command::ResetNeighbors { .. } => {
                        node.neighbors.clear();
                        events.push(StateEvent::NeighborsReset(id.clone()));
                        return events;
                    }
                    Command::HeartBeat { .. } | Command::SendPacket { .. } => unreachable!(),
                }
                events.push(StateEvent::NodeUpdated(id.clone()));
            }
        }
        events
    }

    fn touch(&mut self, id: &NodeId, now: Millis) -> bool {
        match self.nodes.get_mut(id) {
            Some(node) => {
                node.last_activity = now;
                true
            }
            None => false,
        }
    }

    /// Drop animations that have run their course.
    pub fn tick(&mut self, now: Millis) {
        self.advance(now);
        let now = self.now;
        let config = self.config;
        self.animations
            .retain(|a| now.saturating_sub(a.started) < animation_duration(&config, &a.kind));
    }

    pub fn is_active(&self, node: &NodeView) -> bool {
        self.now.saturating_sub(node.last_activity) <= self.config.node_fade_ms
    }

    pub fn is_stale(&self, last_confirmed: Millis) -> bool {
        self.now.saturating_sub(last_confirmed) > self.config.link_fade_ms
    }

    pub fn alpha(&self, node: &NodeView) -> f64 {
        if node.activated {
            1.0
        } else {
            self.config.inactive_alpha
        }
    }

    pub fn snapshot(&self) -> SnapshotDocument {
        let config = &self.config;
        let nodes = self
            .nodes
            .values()
            .map(|n| {
                json!({
                    "id": n.id.as_str(),
                    "x": n.position.x,
                    "y": n.position.y,
                    "color": [n.color.r, n.color.g, n.color.b],
                    "activated": n.activated,
                    "alpha": self.alpha(n),
                    "is_active": self.is_active(n),
                    "text": n.text,
                    "badges": n.badges,
                    "neighbors": n.neighbors.keys().map(NodeId::as_str).collect::<Vec<_>>(),
                    "last_activity": n.last_activity,
                })
            })
            .collect::<Vec<_>>();

        let links = self
            .nodes
            .values()
            .flat_map(|n| {
                n.neighbors.iter().map(move |(to, &confirmed)| {
                    json!({
                        "from": n.id.as_str(),
                        "to": to.as_str(),
                        "last_confirmed": confirmed,
                        "is_stale": self.is_stale(confirmed),
                    })
                })
            })
            .collect::<Vec<_>>();

        let animations = self
            .animations
            .iter()
            .filter_map(|a| {
                let duration = animation_duration(config, &a.kind);
                let elapsed = self.now.saturating_sub(a.started);
                if elapsed >= duration {
                    return None;
                }
                let progress = elapsed as f64 / duration as f64;
                Some(match &a.kind {
                    AnimationKind::Pulse { node } => json!({
                        "kind": "pulse",
                        "node": node.as_str(),
                        "started": a.started,
                        "progress": progress,
                    }),
                    AnimationKind::PacketFlight {
                        sender,
                        receiver,
                        label,
                    } => json!({
                        "kind": "packet",
                        "sender": sender.as_str(),
                        "receiver": receiver.as_str(),
                        "label": label,
                        "started": a.started,
                        "progress": progress,
                    }),
                })
            })
            .collect::<Vec<_>>();

        let warnings = self
            .warnings
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), Value::from(*v)))
            .collect::<serde_json::Map<_, _>>();

        SnapshotDocument(json!({
            "now": self.now,
            "nodes": nodes,
            "links": links,
            "animations": animations,
            "warnings": warnings,
        }))
    }
}

fn animation_duration(config: &FadeConfig, kind: &AnimationKind) -> Millis {
    match kind {
        AnimationKind::Pulse { .. } => config.pulse_duration_ms,
        AnimationKind::PacketFlight { .. } => config.packet_duration_ms,
    }
}

/// Keys that depend on when commands arrived rather than on what they said.
pub const TIME_DEPENDENT_KEYS: &[&str] = &[
    "now",
    "last_activity",
    "last_confirmed",
    "started",
    "progress",
    "is_active",
    "is_stale",
    "animations",
];

/// JSON view of a [`NetworkState`]. Object keys serialize sorted, nodes and
/// links are ordered by node id, so equal states give byte-equal documents.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDocument(pub Value);

impl SnapshotDocument {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("snapshot is always serializable")
    }

    pub fn from_json_str(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s).map(Self)
    }

    pub fn node_count(&self) -> usize {
        self.0["nodes"].as_array().map_or(0, Vec::len)
    }

    pub fn link_count(&self) -> usize {
        self.0["links"].as_array().map_or(0, Vec::len)
    }

    pub fn animation_count(&self) -> usize {
        self.0["animations"].as_array().map_or(0, Vec::len)
    }

    /// Field-by-field comparison that skips [`TIME_DEPENDENT_KEYS`].
    pub fn diff_ignoring_time(&self, actual: &SnapshotDocument) -> Vec<SnapshotDiff> {
        let mut out = Vec::new();
        diff_values("$", &self.0, &actual.0, TIME_DEPENDENT_KEYS, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDiff {
    pub path: String,
    pub expected: Option<Value>,
    pub actual: Option<Value>,
}

impl std::fmt::Display for SnapshotDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: &Option<Value>| v.as_ref().map_or("<missing>".to_string(), Value::to_string);
        write!(
            f,
            "{}: expected {}, got {}",
            self.path,
            show(&self.expected),
            show(&self.actual)
        )
    }
}

pub fn diff_values(
    path: &str,
    expected: &Value,
    actual: &Value,
    ignore: &[&str],
    out: &mut Vec<SnapshotDiff>,
) {
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => {
            let keys: std::collections::BTreeSet<&String> = e.keys().chain(a.keys()).collect();
            for key in keys {
                if ignore.contains(&key.as_str()) {
                    continue;
                }
                let child = format!("{path}.{key}");
                match (e.get(key), a.get(key)) {
                    (Some(ev), Some(av)) => diff_values(&child, ev, av, ignore, out),
                    (ev, av) => out.push(SnapshotDiff {
                        path: child,
                        expected: ev.cloned(),
                        actual: av.cloned(),
                    }),
                }
            }
        }
        (Value::Array(e), Value::Array(a)) => {
            for i in 0..e.len().max(a.len()) {
                let child = format!("{path}[{i}]");
                match (e.get(i), a.get(i)) {
                    (Some(ev), Some(av)) => diff_values(&child, ev, av, ignore, out),
                    (ev, av) => out.push(SnapshotDiff {
                        path: child,
                        expected: ev.cloned(),
                        actual: av.cloned(),
                    }),
                }
            }
        }
        (e, a) if e != a => out.push(SnapshotDiff {
            path: path.to_string(),
            expected: Some(e.clone()),
            actual: Some(a.clone()),
        }),
        _ => {}
    }
}
