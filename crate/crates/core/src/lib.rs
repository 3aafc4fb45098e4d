//! Simulator for differentially-private over-the-air federated learning.
//!
//! Clients train a small MLP locally, scale their clipped updates with a
//! decentralized power-control rule, and transmit simultaneously over a
//! block-fading channel. The server rescales the superposed signal, a
//! cooperative jammer optionally raises the noise floor, and a moments
//! accountant ledger tracks the per-client `(ε, δ)` spend.
//!
//! Module map:
//!
//! - [`model`]: two-layer MLP, cross-entropy, gradients, local solver, clipping
//! - [`fl_protocol`]: FedAvg / FedProx / Upcycled-FL server rules and the round driver
//! - [`channel`]: Rayleigh block fading, AWGN, analog superposition
//! - [`power_control`]: client and server power-control factors, jammer design
//! - [`privacy`]: moments-accountant ledger
//! - [`bound`]: numeric evaluation of the non-convex convergence bound
//! - [`data`]: synthetic client datasets and splits
//! - [`runner`]: configuration, experiment orchestration, CSV and SVG output

pub mod bound;
pub mod channel;
pub mod data;
pub mod error;
pub mod fl_protocol;
pub mod model;
pub mod power_control;
pub mod privacy;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
