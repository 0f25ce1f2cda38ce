//! Forward models, synthetic data generation, and data-pattern tomography
//! for direct phase-space sampling of photon statistics with a two-mode,
//! time-multiplexed click detector.
//!
//! The pipeline, end to end:
//!
//! 1. [`source`] builds the joint photon-number distribution of a (lossy,
//!    overlap-degraded, displaced) two-mode squeezed vacuum on a truncated
//!    Fock ladder, with Gaussian closed forms as independent oracles.
//! 2. [`tmd`] pushes joint distributions through a 16-bin time-multiplexed
//!    click detector with APD efficiency, dark counts and afterpulsing, both
//!    exactly and by Monte Carlo sampling.
//! 3. [`patterns`] calibrates the detector from coherent probes and
//!    reconstructs unknown photon-number distributions by fitting random
//!    subsets of click-pattern frequencies, with bootstrap errors.
//! 4. [`calib`] estimates displacement amplitudes, squeezing and coupling
//!    efficiency, fits the afterpulse fraction, heralds single photons with
//!    the afterpulse-corrected operator, and assembles parity/Wigner curves.

pub mod calib;
pub mod config;
pub mod error;
pub mod fock;
pub mod io;
pub mod patterns;
pub mod solver;
pub mod source;
pub mod tmd;
pub mod util;

pub use error::{Error, Result};
