//! Training-free layout guidance mathematics on an analytically tractable
//! diffusion testbed.
//!
//! The crate implements, end to end:
//!
//! - spatial primitives: box rasterization, center-distance fields, a
//!   center-weighted prior, and spatial softmax ([`grid`]);
//! - the layout energies: an attention energy pulling a token's attention
//!   mass inside its box, a KL regularizer spreading it toward the
//!   center-weighted prior, and hand-derived latent gradients checked against
//!   a finite-difference oracle ([`energy`]);
//! - a verification harness for the softmax ascent analysis, including the
//!   ratio-amplification property of a single gradient step ([`dynamics`]);
//! - the stochastic sampler update: conditional score assembly, the
//!   signal-to-noise step size, the adaptive two-task weight with its exact
//!   two-task bargaining solution, an optional Metropolis correction, and the
//!   gradient-descent baseline ([`langevin`]);
//! - an exact Gaussian-mixture diffusion testbed with a deterministic
//!   denoiser, the full guided sampling loop, a brute-force posterior oracle,
//!   and layout metrics ([`bench`], [`scenario`]).
//!
//! Everything is double precision, deterministic given seeds, and free of
//! global state.

pub mod bench;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod grid;
pub mod head;
pub mod langevin;
pub mod scenario;

pub use error::{Error, Result};
