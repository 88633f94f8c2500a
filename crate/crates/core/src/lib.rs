//! Discounted infinite-horizon mean field games in the weak formulation.
//!
//! A single driftless ensemble ([`paths::PathEnsemble`]) carries every
//! controlled law as Doléans-Dade weights. Optimal controls come from the
//! transformed BSDE `dỸ = −(H̃(Z̃) − λỸ)dt + Z̃ dW`, solved backward by
//! least-squares regression ([`bsde`]); equilibria are fixed points of the
//! best-response map on `(μ, q)` ([`equilibrium`]). The [`asymptotics`] and
//! [`stationary`] modules measure horizon-truncation rates and the long-run
//! behaviour of time-homogeneous games; [`oracle`] holds the brute-force and
//! quadrature references used by the tests.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod bsde;
pub mod control;
pub mod equilibrium;
pub mod error;
mod exec;
pub mod experiment;
pub mod game;
pub mod law;
pub mod metrics;
pub mod oracle;
pub mod paths;
pub mod regression;
pub mod stationary;

pub use error::{MfgError, Result};
pub use game::inline::{registry, GameDescription, InlineCoefficients};
pub use game::{ActionKind, ActionSet, Coefficients, DeclaredBounds, GameSpec, InitialLaw};
pub use law::{ActionLaw, MarginalLaw, PathView};
pub use paths::{MeasureWeights, NoiseKind, PathEnsemble};
