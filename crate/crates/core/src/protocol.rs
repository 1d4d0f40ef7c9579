//! The Irida line protocol.
//!
//! One command per line, tokens separated by spaces or tabs, the first token
//! naming the command. The same encoding is used on the node -> control unit
//! hop and on the control unit -> visualizer hop.
//!
//! Trailing text fields (`setText` text, `setBadge` text, `sendPacket` label)
//! consume the rest of the line. Inner whitespace runs collapse to a single
//! space, which is what makes `parse_line(serialize(c)) == c` well defined.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest unterminated line a [`LineFramer`] will buffer, in bytes.
pub const MAX_LINE_BYTES: usize = 4096;

pub const HEART_BEAT: &str = "heartBeat";
pub const CHANGE_COLOR: &str = "changeColor";
pub const ACTIVATE_NODE: &str = "activateNode";
pub const DISACTIVATE_NODE: &str = "disactivateNode";
pub const SEND_PACKET: &str = "sendPacket";
pub const ADD_NEIGHBOR: &str = "addNeighbor";
/// British spelling emitted by some firmwares. Parsed as `addNeighbor`.
pub const ADD_NEIGHBOUR_ALIAS: &str = "addNeighbour";
pub const RESET_NEIGHBORS: &str = "resetNeighbors";
pub const SET_TEXT: &str = "setText";
pub const SET_BADGE: &str = "setBadge";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    /// Blank or whitespace-only line. Callers treat this as "skip".
    #[error("empty line")]
    EmptyLine,
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("`{command}` expects {expected}, got {got} argument(s)")]
    Arity {
        command: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("{field} = `{value}` is out of range ({allowed})")]
    Range {
        field: &'static str,
        value: String,
        allowed: &'static str,
    },
    #[error("{field} = `{value}` is not a valid number")]
    NumberFormat { field: &'static str, value: String },
    #[error("invalid node id `{0}`")]
    InvalidNodeId(String),
}

/// Unique identifier of a node: a non-empty token without whitespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(token: impl Into<String>) -> Result<Self, ParseError> {
        let token = token.into();
        if token.is_empty() || token.chars().any(is_separator_or_newline) {
            return Err(ParseError::InvalidNodeId(token));
        }
        Ok(Self(token))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for NodeId {
    type Error = ParseError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl TryFrom<&str> for NodeId {
    type Error = ParseError;
    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> Self {
        id.0
    }
}

/// Normalized position in the deployment, both coordinates in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Result<Self, ParseError> {
        check_unit("x", x)?;
        check_unit("y", y)?;
        Ok(Self { x, y })
    }
}

fn check_unit(field: &'static str, v: f64) -> Result<(), ParseError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ParseError::Range {
            field,
            value: v.to_string(),
            allowed: "0 <= v <= 1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb {
    pub const WHITE: Rgb = Rgb::new(255, 255, 255);
    pub const RED: Rgb = Rgb::new(255, 0, 0);
    pub const BLUE: Rgb = Rgb::new(0, 0, 255);

    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }
}

/// Badge slot: 1 is the top-left badge, 2 the top-right one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BadgeSlot(u8);

impl BadgeSlot {
    pub const LEFT: BadgeSlot = BadgeSlot(1);
    pub const RIGHT: BadgeSlot = BadgeSlot(2);

    pub fn new(slot: u8) -> Result<Self, ParseError> {
        match slot {
            1 | 2 => Ok(Self(slot)),
            other => Err(ParseError::Range {
                field: "badge slot",
                value: other.to_string(),
                allowed: "1 or 2",
            }),
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based index into a two-slot badge array.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }
}

impl TryFrom<u8> for BadgeSlot {
    type Error = ParseError;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<BadgeSlot> for u8 {
    fn from(slot: BadgeSlot) -> Self {
        slot.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    HeartBeat {
        id: NodeId,
        position: Option<Position>,
    },
    ChangeColor {
        id: NodeId,
        color: Rgb,
    },
    ActivateNode {
        id: NodeId,
    },
    DisactivateNode {
        id: NodeId,
    },
    SendPacket {
        sender: NodeId,
        receiver: NodeId,
        label: Option<String>,
    },
    AddNeighbor {
        id: NodeId,
        neighbor: NodeId,
    },
    ResetNeighbors {
        id: NodeId,
    },
    SetText {
        id: NodeId,
        text: String,
    },
    SetBadge {
        id: NodeId,
        slot: BadgeSlot,
        text: String,
    },
}

impl Command {
    /// Canonical wire name.
    pub fn name(&self) -> &'static str {
        match self {
            Command::HeartBeat { .. } => HEART_BEAT,
            Command::ChangeColor { .. } => CHANGE_COLOR,
            Command::ActivateNode { .. } => ACTIVATE_NODE,
            Command::DisactivateNode { .. } => DISACTIVATE_NODE,
            Command::SendPacket { .. } => SEND_PACKET,
            Command::AddNeighbor { .. } => ADD_NEIGHBOR,
            Command::ResetNeighbors { .. } => RESET_NEIGHBORS,
            Command::SetText { .. } => SET_TEXT,
            Command::SetBadge { .. } => SET_BADGE,
        }
    }

    /// The node the command is about (the sender for `sendPacket`).
    pub fn subject(&self) -> &NodeId {
        match self {
            Command::HeartBeat { id, .. }
            | Command::ChangeColor { id, .. }
            | Command::ActivateNode { id }
            | Command::DisactivateNode { id }
            | Command::AddNeighbor { id, .. }
            | Command::ResetNeighbors { id }
            | Command::SetText { id, .. }
            | Command::SetBadge { id, .. } => id,
            Command::SendPacket { sender, .. } => sender,
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())?;
        match self {
            Command::HeartBeat { id, position } => {
                write!(f, " {id}")?;
                if let Some(p) = position {
                    // f64 Display is the shortest representation that parses back exactly.
                    write!(f, " {} {}", p.x, p.y)?;
                }
                Ok(())
            }
            Command::ChangeColor { id, color } => {
                write!(f, " {id} {} {} {}", color.r, color.g, color.b)
            }
            Command::ActivateNode { id }
            | Command::DisactivateNode { id }
            | Command::ResetNeighbors { id } => write!(f, " {id}"),
            Command::SendPacket {
                sender,
                receiver,
                label,
            } => {
                write!(f, " {sender} {receiver}")?;
                if let Some(label) = label {
                    write!(f, " {label}")?;
                }
                Ok(())
            }
            Command::AddNeighbor { id, neighbor } => write!(f, " {id} {neighbor}"),
            Command::SetText { id, text } => write!(f, " {id} {text}"),
            Command::SetBadge { id, slot, text } => write!(f, " {id} {} {text}", slot.get()),
        }
    }
}

/// Canonical single-line encoding, without a trailing newline.
pub fn serialize(cmd: &Command) -> String {
    cmd.to_string()
}

fn is_separator(c: char) -> bool {
    c == ' ' || c == '\t'
}

fn is_separator_or_newline(c: char) -> bool {
    is_separator(c) || c == '\r' || c == '\n'
}

/// Collapse a free-text field to its canonical form: words joined by one space.
pub fn normalize_text(text: &str) -> String {
    text.split(is_separator_or_newline)
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_line(line: &str) -> Result<Command, ParseError> {
    let tokens: Vec<&str> = line.split(is_separator).filter(|t| !t.is_empty()).collect();
    let Some((&name, args)) = tokens.split_first() else {
        return Err(ParseError::EmptyLine);
    };

    let arity = |command: &'static str, expected: &'static str| ParseError::Arity {
        command,
        expected,
        got: args.len(),
    };
    let id = |i: usize| NodeId::new(args[i]);
    let rest = |from: usize| args[from..].join(" ");

    let cmd = match name {
        HEART_BEAT => match args.len() {
            1 => Command::HeartBeat {
                id: id(0)?,
                position: None,
            },
            3 => Command::HeartBeat {
                id: id(0)?,
                position: Some(Position::new(
                    parse_float("x", args[1])?,
                    parse_float("y", args[2])?,
                )?),
            },
            _ => return Err(arity(HEART_BEAT, "ID or ID x y")),
        },
        CHANGE_COLOR => {
            if args.len() != 4 {
                return Err(arity(CHANGE_COLOR, "ID R G B"));
            }
            Command::ChangeColor {
                id: id(0)?,
                color: Rgb::new(
                    parse_channel("R", args[1])?,
                    parse_channel("G", args[2])?,
                    parse_channel("B", args[3])?,
                ),
            }
        }
        ACTIVATE_NODE | DISACTIVATE_NODE | RESET_NEIGHBORS => {
            if args.len() != 1 {
                let command = match name {
                    ACTIVATE_NODE => ACTIVATE_NODE,
                    DISACTIVATE_NODE => DISACTIVATE_NODE,
                    _ => RESET_NEIGHBORS,
                };
                return Err(arity(command, "ID"));
            }
            let id = id(0)?;
            match name {
                ACTIVATE_NODE => Command::ActivateNode { id },
                DISACTIVATE_NODE => Command::DisactivateNode { id },
                _ => Command::ResetNeighbors { id },
            }
        }
        SEND_PACKET => {
            if args.len() < 2 {
                return Err(arity(SEND_PACKET, "IDsender IDreceiver [Label]"));
            }
            Command::SendPacket {
                sender: id(0)?,
                receiver: id(1)?,
                label: (args.len() > 2).then(|| rest(2)),
            }
        }
        ADD_NEIGHBOR | ADD_NEIGHBOUR_ALIAS => {
            if args.len() != 2 {
                return Err(arity(ADD_NEIGHBOR, "ID IDneighbor"));
            }
            Command::AddNeighbor {
                id: id(0)?,
                neighbor: id(1)?,
            }
        }
        SET_TEXT => {
            if args.len() < 2 {
                return Err(arity(SET_TEXT, "ID Text"));
            }
            Command::SetText {
                id: id(0)?,
                text: rest(1),
            }
        }
        SET_BADGE => {
            if args.len() < 3 {
                return Err(arity(SET_BADGE, "ID BadgeNumber BadgeText"));
            }
            Command::SetBadge {
                id: id(0)?,
                slot: parse_badge_slot(args[1])?,
                text: rest(2),
            }
        }
        other => return Err(ParseError::UnknownCommand(other.to_string())),
    };
    Ok(cmd)
}

fn parse_float(field: &'static str, token: &str) -> Result<f64, ParseError> {
    token.parse::<f64>().map_err(|_| ParseError::NumberFormat {
        field,
        value: token.to_string(),
    })
}

/// Base-10 integer in `[min, max]`. Well-formed integers outside the range
/// (including ones too large for any machine type) are range errors.
fn parse_bounded_int(
    field: &'static str,
    token: &str,
    min: u8,
    max: u8,
    allowed: &'static str,
) -> Result<u8, ParseError> {
    let digits = token.strip_prefix(['-', '+']).unwrap_or(token);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ParseError::NumberFormat {
            field,
            value: token.to_string(),
        });
    }
    let out_of_range = || ParseError::Range {
        field,
        value: token.to_string(),
        allowed,
    };
    if token.starts_with('-') && digits.bytes().any(|b| b != b'0') {
        return Err(out_of_range());
    }
    let value: u8 = digits.parse().map_err(|_| out_of_range())?;
    if value < min || value > max {
        return Err(out_of_range());
    }
    Ok(value)
}

fn parse_channel(field: &'static str, token: &str) -> Result<u8, ParseError> {
    parse_bounded_int(field, token, 0, 255, "0..=255")
}

fn parse_badge_slot(token: &str) -> Result<BadgeSlot, ParseError> {
    let slot = parse_bounded_int("badge slot", token, 1, 2, "1 or 2")?;
    BadgeSlot::new(slot)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("unterminated line exceeds {limit} bytes, {discarded} bytes discarded")]
    OversizeLine { limit: usize, discarded: usize },
}

/// Output of one [`LineFramer::push`] call.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Frames {
    pub lines: Vec<Vec<u8>>,
    pub error: Option<FrameError>,
}

/// Reassembles newline-terminated lines from arbitrary byte chunks.
///
/// `\r\n` is accepted as a terminator. When the unterminated tail grows past
/// [`MAX_LINE_BYTES`] it is discarded, an error is reported, and the framer
/// skips input up to the next newline so no truncated fragment is emitted.
#[derive(Debug, Default)]
pub struct LineFramer {
    carry: Vec<u8>,
    skipping: bool,
}

impl LineFramer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn carry(&self) -> &[u8] {
        &self.carry
    }

    pub fn push(&mut self, bytes: &[u8]) -> Frames {
        let mut out = Frames::default();
        let mut rest = bytes;
        while let Some(pos) = rest.iter().position(|&b| b == b'\n') {
            let (head, tail) = rest.split_at(pos);
            rest = &tail[1..];
            if std::mem::take(&mut self.skipping) {
                continue;
            }
            let mut line = std::mem::take(&mut self.carry);
            line.extend_from_slice(head);
            if line.last() == Some(&b'\r') {
                line.pop();
            }
            out.lines.push(line);
        }
        if !self.skipping {
            self.carry.extend_from_slice(rest);
            if self.carry.len() > MAX_LINE_BYTES {
                out.error = Some(FrameError::OversizeLine {
                    limit: MAX_LINE_BYTES,
                    discarded: self.carry.len(),
                });
                self.carry.clear();
                self.skipping = true;
            }
        }
        out
    }

    /// Take whatever unterminated bytes are buffered, e.g. at the end of a
    /// datagram or when the stream closes.
    pub fn finish(&mut self) -> Option<Vec<u8>> {
        self.skipping = false;
        let mut line = std::mem::take(&mut self.carry);
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        (!line.is_empty()).then_some(line)
    }
}

/// Functional form of [`LineFramer::push`]: complete lines out, tail kept in `carry`.
pub fn split_frames(bytes: &[u8], carry: &mut Vec<u8>) -> Result<Vec<Vec<u8>>, FrameError> {
    let mut framer = LineFramer {
        carry: std::mem::take(carry),
        skipping: false,
    };
    let frames = framer.push(bytes);
    *carry = framer.carry;
    match frames.error {
        Some(err) => Err(err),
        None => Ok(frames.lines),
    }
}
