//! Two-scale finite-element solver for nonlinear magnetoquasistatic
//! homogenization of soft magnetic composites.
//!
//! The macroscale carries the homogenized potential `a_M`, one periodic cell
//! problem per macro Gauss point resolves grain eddy currents and saturation.
//! Two couplings are provided: a monolithic Newton scheme with a
//! finite-difference upscaled Jacobian ([`monolithic`]) and waveform
//! relaxation over time windows ([`wr`]). A grain-resolved reference solver
//! ([`reference`]) and the post-processing in [`analysis`] close the loop.

pub mod analysis;
pub mod cell;
pub mod config;
pub mod coupled;
pub mod error;
pub mod fem;
pub mod macroscale;
pub mod material;
pub mod mesh;
pub mod monolithic;
pub mod reference;
pub mod tensor;
pub mod waveform;
pub mod wr;

pub use error::{Error, Result};
