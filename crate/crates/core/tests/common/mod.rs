//! Independent oracles and loopback helpers shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::time::Duration;

use irida::journal::EventRecord;
use irida::protocol::{parse_line, BadgeSlot, Command, NodeId, Position, Rgb};
use irida::sim::{run_scripted, Script, SimConfig};
use proptest::prelude::*;

/// Node indices within Manhattan distance `radius` of (col, row), found by
/// enumerating offsets rather than measuring distances.
pub fn manhattan_ball(width: u32, height: u32, col: u32, row: u32, radius: i64) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for dx in -radius..=radius {
        let rest = radius - dx.abs();
        for dy in -rest..=rest {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (c, r) = (col as i64 + dx, row as i64 + dy);
            if (0..width as i64).contains(&c) && (0..height as i64).contains(&r) {
                out.insert((r * width as i64 + c) as usize);
            }
        }
    }
    out
}

/// Expected neighbor sets keyed by default id `0x..`.
pub fn ball_oracle(width: u32, height: u32, radius: i64) -> BTreeMap<String, BTreeSet<String>> {
    let id = |i: usize| format!("0x{i:02x}");
    let mut out = BTreeMap::new();
    for row in 0..height {
        for col in 0..width {
            let me = (row * width + col) as usize;
            out.insert(
                id(me),
                manhattan_ball(width, height, col, row, radius)
                    .into_iter()
                    .map(id)
                    .collect(),
            );
        }
    }
    out
}

/// Hop distance from `origin` to every reachable node.
pub fn bfs_layers(
    adjacency: &BTreeMap<String, BTreeSet<String>>,
    origin: &str,
) -> BTreeMap<String, usize> {
    let mut dist = BTreeMap::from([(origin.to_string(), 0usize)]);
    let mut queue = VecDeque::from([origin.to_string()]);
    while let Some(n) = queue.pop_front() {
        let d = dist[&n];
        for m in adjacency.get(&n).into_iter().flatten() {
            if !dist.contains_key(m) {
                dist.insert(m.clone(), d + 1);
                queue.push_back(m.clone());
            }
        }
    }
    dist
}

pub fn as_strings(map: &BTreeMap<NodeId, BTreeSet<NodeId>>) -> BTreeMap<String, BTreeSet<String>> {
    map.iter()
        .map(|(k, v)| (k.to_string(), v.iter().map(|n| n.to_string()).collect()))
        .collect()
}

pub fn lossless(width: u32, height: u32, seed: u64) -> SimConfig {
    SimConfig {
        grid_width: width,
        grid_height: height,
        seed,
        time_scale: 0.0,
        ..SimConfig::default()
    }
}

/// Final color per node folded from emitted changeColor lines.
pub fn final_colors(records: &[EventRecord]) -> BTreeMap<String, (u8, u8, u8)> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Ok(Command::ChangeColor { id, color }) = parse_line(&r.line) {
            out.insert(id.to_string(), (color.r, color.g, color.b));
        }
    }
    out
}

pub struct FloodOutcome {
    pub records: Vec<EventRecord>,
    pub neighbors: BTreeMap<String, BTreeSet<String>>,
    pub forward_transmissions: u64,
    pub forwards_per_node: BTreeMap<String, u64>,
    pub shake_at: u64,
    pub settled_at: u64,
    /// A new hello round began while the flood was in flight.
    pub overlapped_rediscovery: bool,
}

fn run_until_idle(sim: &mut irida::sim::Simulation, from: u64) -> u64 {
    let mut t = from;
    loop {
        t += 50;
        sim.run_until(t);
        if sim.radio_idle() {
            return t;
        }
    }
}

/// Let discovery settle, shake `origin` once, and run until the radio is quiet again.
pub fn run_flood(width: u32, height: u32, seed: u64, origin: &str) -> FloodOutcome {
    let mut sim = irida::sim::Simulation::new(lossless(width, height, seed)).unwrap();
    let shake_at = run_until_idle(&mut sim, 1_000);
    let neighbors = as_strings(&sim.neighbor_sets());
    let origin = NodeId::new(origin).unwrap();
    sim.schedule_shake(shake_at, &origin, 2.5).unwrap();
    let settled_at = run_until_idle(&mut sim, shake_at);
    let records = sim.drain_emissions();
    let overlapped_rediscovery = records
        .iter()
        .any(|r| r.t >= shake_at && r.line.starts_with("resetNeighbors"));
    let forwards_per_node = sim
        .nodes()
        .iter()
        .map(|n| (n.id.to_string(), n.forwards_sent))
        .collect();
    FloodOutcome {
        records,
        neighbors,
        forward_transmissions: sim.stats().forward_transmissions,
        forwards_per_node,
        shake_at,
        settled_at,
        overlapped_rediscovery,
    }
}

pub fn run_script_text(config: SimConfig, script: &str) -> Vec<EventRecord> {
    run_scripted(config, &Script::parse(script).unwrap())
        .unwrap()
        .records
}

/// Bind a loopback UDP socket for receiving relayed lines.
pub async fn udp_listener() -> tokio::net::UdpSocket {
    tokio::net::UdpSocket::bind("127.0.0.1:0").await.unwrap()
}

/// Send a control request and return the reply line.
pub async fn control(socket: &tokio::net::UdpSocket, to: SocketAddr, request: &str) -> String {
    socket.send_to(request.as_bytes(), to).await.unwrap();
    let mut buf = [0u8; 512];
    let (n, _) = tokio::time::timeout(Duration::from_secs(2), socket.recv_from(&mut buf))
        .await
        .expect("control reply")
        .unwrap();
    String::from_utf8_lossy(&buf[..n]).trim().to_string()
}

/// Receive datagrams until `quiet` passes with nothing new.
pub async fn drain(socket: &tokio::net::UdpSocket, quiet: Duration) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut buf = vec![0u8; 65_535];
    while let Ok(Ok((n, _))) = tokio::time::timeout(quiet, socket.recv_from(&mut buf)).await {
        out.push(buf[..n].to_vec());
    }
    out
}

pub fn loopback(addr: SocketAddr) -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], addr.port()))
}

/// Control unit on ephemeral loopback ports.
pub fn test_icu_config() -> irida::icu::IcuConfig {
    irida::icu::IcuConfig {
        bind: "127.0.0.1".parse().unwrap(),
        data_port: 0,
        control_port: 0,
        ws_port: Some(0),
        ..irida::icu::IcuConfig::default()
    }
}

pub fn node_id() -> impl Strategy<Value = NodeId> {
    "[!-~]{1,8}".prop_map(|s| NodeId::new(s).unwrap())
}

pub fn text() -> impl Strategy<Value = String> {
    prop::collection::vec("[!-~]{1,6}", 1..5).prop_map(|w| w.join(" "))
}

pub fn unit() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0]
}

pub fn command() -> impl Strategy<Value = Command> {
    prop_oneof![
        (node_id(), prop::option::of((unit(), unit()))).prop_map(|(id, p)| Command::HeartBeat {
            id,
            position: p.map(|(x, y)| Position::new(x, y).unwrap()),
        }),
        (node_id(), any::<(u8, u8, u8)>()).prop_map(|(id, (r, g, b))| Command::ChangeColor {
            id,
            color: Rgb::new(r, g, b),
        }),
        node_id().prop_map(|id| Command::ActivateNode { id }),
        node_id().prop_map(|id| Command::DisactivateNode { id }),
        (node_id(), node_id(), prop::option::of(text())).prop_map(|(sender, receiver, label)| {
            Command::SendPacket {
                sender,
                receiver,
                label,
            }
        }),
        (node_id(), node_id()).prop_map(|(id, neighbor)| Command::AddNeighbor { id, neighbor }),
        node_id().prop_map(|id| Command::ResetNeighbors { id }),
        (node_id(), text()).prop_map(|(id, text)| Command::SetText { id, text }),
        (node_id(), 1u8..=2, text()).prop_map(|(id, slot, text)| Command::SetBadge {
            id,
            slot: BadgeSlot::new(slot).unwrap(),
            text,
        }),
    ]
}
