//! Discrete-event simulator of hypervisor-enforced timing-channel mitigation.
//!
//! Guests run on an instruction-counted clock; all of their I/O crosses a
//! mitigation boundary in bundles aligned to a fixed real-time slot grid.
//! [`host::run`] executes a [`host::Scenario`]; [`analysis`] turns the
//! result into reports.

pub mod analysis;
pub mod attacks;
pub mod backend;
pub mod config;
pub mod engine;
pub mod error;
pub mod guest;
pub mod host;
pub mod mitigator;
pub mod sweep;
pub mod time;
pub mod units;
pub mod virtio;
pub mod vtimer;

pub use error::{Error, Result};
pub use time::{ArtificialTime, ByteCost, Rate, RealTime};
