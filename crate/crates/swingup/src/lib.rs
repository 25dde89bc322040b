//! Simulation toolkit for ultrafast coherent control of a single optical
//! qubit in a color center: spectral pulse carving, rotating-frame Lindblad
//! dynamics, detector-level photon statistics, nonlinear fitting, and the
//! experiment protocols built on top of them (Rabi sweeps, lifetime,
//! quasi-CW coherence, and the two-color swing-up scan).
//!
//! Conventions used throughout:
//! - frequencies and detunings are optical-frequency offsets in GHz from the
//!   C transition (the rotating-frame reference),
//! - time is in ps for pulse-scale quantities and ns for decay-scale ones,
//! - drive envelopes are complex Rabi frequencies in rad/ps in the rotating
//!   frame of the C transition.

pub mod config;
pub mod dynamics;
pub mod estimators;
pub mod io;
pub mod photonstats;
pub mod protocols;
pub mod pulsecraft;
pub mod svg;

/// Conversion from a frequency in GHz to an angular frequency in rad/ps.
pub const GHZ_TO_RAD_PS: f64 = 2.0 * std::f64::consts::PI * 1.0e-3;

/// Time-bandwidth product (intensity FWHM x intensity FWHM) of a
/// transform-limited Gaussian pulse.
pub const GAUSSIAN_TBP: f64 = 0.44127;
