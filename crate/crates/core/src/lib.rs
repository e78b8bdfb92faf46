//! Transparent crash recovery for CoAP servers behind a border gateway.
//!
//! The gateway watches CoAP traffic entering and leaving a low-power network,
//! records the interaction state each node holds in a state directory, and
//! replays that state when a node comes back from a reboot. The [`sim`]
//! module provides the deterministic network the gateway is exercised on.

pub mod addr;
pub mod coap;
pub mod directory;
pub mod gateway;
pub mod harness;
pub mod recovery;
pub mod sim;
pub mod time;

pub use addr::{Endpoint, Prefix};
pub use time::SimTime;
