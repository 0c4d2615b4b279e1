//! Particle simulation and verification toolkit for McKean–Vlasov SDEs with
//! delay, where drift and diffusion depend on the law of the path segment
//! `X_t = (X(t+θ))_{θ∈[−r0,0]}`.
//!
//! Modules, bottom up:
//! - [`pathspace`]: segments on a uniform grid of `[−r0, 0]`, trajectories,
//!   Cameron–Martin vectors.
//! - [`transport`]: W2 between equal-size empirical path measures.
//! - [`models`]: coefficient models with certified regularity constants.
//! - [`simulate`]: interacting-particle Euler–Maruyama, Picard iteration,
//!   weak-form residuals.
//! - [`bounds`]: contraction bounds, exponential-contraction criterion,
//!   entropy utilities.
//! - [`coupling`]: Girsanov coupling and Harnack-type checks.
//! - [`ibp`]: shift plans, integration-by-parts weights, shift-Harnack.

pub mod bounds;
pub mod coupling;
pub mod error;
pub mod functionals;
pub mod ibp;
pub mod models;
pub mod pathspace;
pub mod rng;
pub mod samplers;
pub mod simulate;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
pub use pathspace::{CameronMartinVector, PathGrid, Segment, SegmentView, Trajectory};
pub use transport::{EmpiricalPathMeasure, PathMeasure};
