//! Driven-spin dynamics of a single NV centre under continuous microwave dressing.
//!
//! The crate is layered bottom-up:
//!
//! - [`spin_core`]: small dense complex linear algebra, spin operators and
//!   piecewise-constant propagation.
//! - [`nv_model`]: the NV ground-state Hamiltonian with ¹⁴N hyperfine structure,
//!   the rotating frame, the Mollow-triplet line shape and the dressed-state ladder.
//! - [`dynamics`]: Ornstein–Uhlenbeck dephasing, pulse sequences and the
//!   trajectory-averaged readout engine.
//! - [`analysis`]: damped Gauss–Newton fitters (triplet, sinusoid, exponential, line).
//! - [`experiments`]: recipes for ODMR, dressed spectra, sweeps, Rabi and echo scans.
//! - [`sensing`]: AC-field echo phase, the ancilla phase adder and sensitivity arithmetic.
//!
//! Frequencies are ordinary frequencies in MHz, times are in μs, static fields
//! in mT and drive amplitudes in μT.

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod nv_model;
pub mod sensing;
pub mod spin_core;

pub use error::{Error, Result};
