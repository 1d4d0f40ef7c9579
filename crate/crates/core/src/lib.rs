//! Irida: a real-time visualization feedback pipeline for wireless sensor
//! network testbeds.
//!
//! Nodes emit one-line text commands ([`protocol`]). A control unit
//! ([`icu`]) relays every line to each registered visualizer over UDP and to
//! WebSocket subscribers. Visualizers fold the stream into a
//! [`net_state::NetworkState`]; [`ivu`] is a headless one that can record,
//! replay and snapshot. [`sim`] stands in for the physical testbed.

pub mod demo;
pub mod icu;
pub mod ivu;
pub mod journal;
pub mod net_state;
pub mod protocol;
pub mod sim;
