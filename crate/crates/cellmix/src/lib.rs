//! Simulation and measurement toolkit for dissipation enhancement by
//! cellular flows on the two-dimensional torus.
//!
//! The crate has two faces of the same dynamics:
//!
//! * a probabilistic one — the Itô diffusion `dX = A·v(X)dt + √κ dB`,
//!   its boundary-layer stopping clocks, and a four-stage coupling whose
//!   meeting time bounds the mixing time;
//! * an analytic one — the advection–diffusion semigroup on the torus,
//!   from which dissipation time, total-variation mixing time, and the
//!   effective diffusivity are measured spectrally.
//!
//! `experiments` ties both together with regime classification, parameter
//! sweeps, and scaling-law fits; `cli` exposes everything as the `cellmix`
//! binary.

pub mod flowfield;
pub mod rng;
pub mod sde;
pub mod stopping;
pub mod coupling;
