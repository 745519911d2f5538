//! Incremental-passivity toolkit for grid-forming inverters under
//! hybrid-angle control.
//!
//! - [`model`]: averaged inverter model, control law and incremental storage.
//! - [`certify`]: decentralized large-signal passivity certificate.
//! - [`smallsignal`]: equilibria, linearization, LMI and IFP/OFP indices.
//! - [`netsim`]: multi-inverter network simulation.
//! - [`verify`]: trajectory-level dissipation checks.
//! - [`cli`]: command-line front end.

pub mod certify;
pub mod linalg;
pub mod model;
pub mod netsim;
pub mod smallsignal;
pub mod verify;
pub mod cli;
