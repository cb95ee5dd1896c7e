//! Core algorithms for a perimeter-control laboratory on signalized grid
//! networks.
//!
//! The crate hosts the full compute stack with no IO and no OS dependencies
//! (`no_std` + `alloc`): grid network construction with cordon geometry,
//! a mesoscopic point-queue traffic simulation, KPI accounting, the classic
//! gating controllers (fixed-time, threshold feedback, PI metering, queue
//! balancing), a small dense Q-network with backpropagation, decentralized
//! signal agents with replay training, and the combined agent-plus-feedback
//! cordon strategy. Everything is deterministic given the explicit seeds;
//! entropy never enters from the environment.
//!
//! File formats, CSV export, configuration, and the command-line interface
//! live in the companion `cordon-lab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod control;
pub mod demand;
pub mod error;
pub mod marl;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod pc;
pub mod rng;
pub mod route;
pub mod runner;
pub mod sim;

pub use error::CoreError;
