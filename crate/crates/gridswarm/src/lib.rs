//! Co-simulation of radial distribution feeders under distributed
//! grid-edge control.
//!
//! The crate couples three layers:
//!
//! * a branch-flow feeder model and power-flow solver ([`feeder`],
//!   [`powerflow`]),
//! * voltage sensitivity analysis and grid-edge voltage inference from
//!   sparse metering ([`sensitivity`]),
//! * a simulated clustered communication network carrying a two-level
//!   distributed control scheme - cooperative reactive-power control plus
//!   coordinated active-power curtailment ([`comms`], [`control`]),
//!
//! orchestrated by a discrete-time engine ([`engine`]) with deterministic,
//! reproducible logs.

pub mod comms;
pub mod control;
pub mod engine;
pub mod error;
pub mod feeder;
pub mod par;
pub mod powerflow;
pub mod scenario;
pub mod sensitivity;
