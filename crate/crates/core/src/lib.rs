//! Simulator and protocol library for absolute time delivery over a 5G air
//! interface: base-station time broadcast, delay estimation, UE compensation,
//! attacks and gateway clock selection.

pub mod attack;
pub mod bs;
pub mod btca;
pub mod clock;
pub mod phy;
pub mod signaling;
pub mod sim;
pub mod time;
pub mod ue;

pub use time::{Duration, TimePoint};
