//! Tail-risk-aware user-centric AP clustering for cell-free RAN.
//!
//! The crate simulates a slotted downlink in which every slot the AP-UE
//! association is chosen by a drift-plus-penalty rule: energy efficiency
//! weighted by `V` plus queue-weighted finite-blocklength rates. Queue
//! weights combine the physical backlog with virtual queues that track
//! exceedance frequency and the first two excess moments above a threshold;
//! peaks-over-threshold GPD fits of the backlog feed back into those weights.
//!
//! Module map:
//! - [`topology`]: geometry, path loss, pilots.
//! - [`channel`]: MMSE estimate quality and the Monte Carlo SINR oracle.
//! - [`phy`]: closed-form SINR, finite-blocklength rate, power, EE.
//! - [`queueing`]: physical and virtual queues, arrivals, weights.
//! - [`evt`]: POT extraction, GPD fitting and tail descriptors.
//! - [`solver`]: relaxed per-slot problem, SCA, projection.
//! - [`sim`]: the slot loop, policies and summaries.
//! - [`config`]: TOML experiment configuration.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod error;
pub mod evt;
pub mod grid;
pub mod par;
pub mod phy;
pub mod queueing;
pub mod rng;
pub mod sim;
pub mod solver;
pub mod topology;

pub use error::{Error, Result};
pub use grid::Grid;

/// Version string embedded in every output file.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
