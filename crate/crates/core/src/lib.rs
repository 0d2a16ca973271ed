// SPDX-License-Identifier: Apache-2.0

//! Compiler core for mapping feedforward networks onto a synapse-per-weight
//! neuromorphic fabric.
//!
//! The pipeline is:
//!
//! 1. [`factorizer`] splits a layer's 4th-order weight tensor into a chain of
//!    five sparse sub-layers (channel, vertical, horizontal, code generation,
//!    inverse transform) by a chain of truncated SVDs, with ranks chosen for a
//!    target approximation error.
//! 2. [`finetune`] recovers accuracy of aggressively approximated
//!    fully-connected networks with plain SGD.
//! 3. [`tdnn`] rolls the factored network into a time-delay network over a
//!    raster-scanned input stream, realizing spatial taps with delay chains.
//! 4. [`fxsim`] evaluates that network in bit-serial fixed point, both as a
//!    word-level functional model and as a cycle-accurate bit-level simulation.
//! 5. [`emit`] writes a structural netlist, a DOT graph, and a resource report.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command line
//! live in the `tdnc` crate.

#![cfg_attr(not(test), no_std)]
// Index loops read closer to the linear algebra they implement.
#![allow(clippy::needless_range_loop)]

extern crate alloc;

mod error;
mod math;

pub mod emit;
pub mod factorizer;
pub mod finetune;
pub mod fxsim;
pub mod netir;
pub mod tdnn;
pub mod tensor;

pub use error::{Error, Result};
