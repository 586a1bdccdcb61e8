//! Solvers for Wasserstein distributionally robust minimax problems in the
//! transport-map formulation.
//!
//! The library optimizes `min_theta max_T E_x[ l(theta, T(x)) - ||T(x) - x||^2
//! / (2 gamma) ]` on finite samples by representing the map through its
//! particle values `v_i = T(x_i)`. It provides:
//!
//! - particle GDA (plain, momentum, alternating) with cyclic batch scheduling,
//! - a double-loop elimination baseline with warm-started BFGS inner solves,
//! - a one-sided damped proximal-point scheme for the theta-fast setting,
//! - a neural transport map trained concurrently by an L2 matching loss,
//! - gradient-norm metrics, finite-difference oracles, and probes of the
//!   smoothness / error-bound / curvature premises.

pub mod data;
pub mod diagnostics;
pub mod elimination;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod particles;
pub mod ppm;
pub mod problem;
pub mod rng;
pub mod runlog;
pub mod transport_net;

pub use error::{Error, Result};
pub use problem::{LossModel, ProblemSpec, SolverConfig};
