//! Estimation of equilibrium models from observed equilibria.
//!
//! The library fits the function defining a variational inequality (VI) from
//! observed solutions: parametrically over a basis-function family via conic
//! programs, and nonparametrically over a reproducing-kernel Hilbert space via
//! convex quadratic programs. Fitted models come with duality certificates,
//! ambiguity envelopes, generalization bounds, and forward solvers for
//! validating predictions.
//!
//! Module map:
//!
//! - [`conic`]: conic-representable feasible regions (membership, Slater
//!   checks, Euclidean projection).
//! - [`solver`]: one contract for LP / convex-QP / SOCP solves with certified
//!   primal-dual output.
//! - [`vi`]: VI definitions, eps-approximation via conic duality, certificate
//!   checks, extragradient forward solver, proximity bounds.
//! - [`traffic`]: road networks, shortest paths, convex-combinations traffic
//!   assignment, TNTP file round-trip.
//! - [`kernels`]: kernel evaluation, Gram matrices, RKHS norms, kernel
//!   expansions.
//! - [`fit`]: the inverse-VI estimation programs (parametric, nonparametric,
//!   priors, ambiguity envelopes).
//! - [`bounds`]: scenario and Rademacher generalization bounds, prediction
//!   radii, cross-validation harness.
//! - [`bertrand`]: two-firm price-competition experiments (simulation and
//!   demand estimation).
//! - [`wardrop`]: congestion-function estimation from perturbed equilibrium
//!   flows.

pub mod bertrand;
pub mod bounds;
pub mod conic;
pub mod error;
pub mod fit;
pub mod kernels;
pub mod solver;
pub mod traffic;
pub mod vi;
pub mod wardrop;

pub use error::{Error, Result};
