//! Coupled Monte Carlo laboratory for two-parameter SDE flows `X^x_{s,t}`.
//!
//! The crate is organised around six modules:
//!
//! * [`model`]: coefficient functions, Lyapunov data and the pointwise margins of
//!   every structural hypothesis (generator, monotonicity, exponential moments, growth).
//! * [`checker`]: sampled certification of those hypotheses on a box, plus least-constant fitting.
//! * [`sim`]: coupled Euler / tamed Euler flows from many anchors on shared Brownian paths,
//!   the variational process and difference quotients.
//! * [`estimate`]: empirical moments and Hölder quotients compared against closed-form bounds.
//! * [`zoo`]: built-in models with oracles.
//! * [`cli`]: the batch front-end used by the `flowlab` binary.

pub mod checker;
pub mod cli;
pub mod error;
pub mod estimate;
pub mod linalg;
pub mod model;
pub mod numfmt;
pub mod quadrature;
pub mod sim;
pub mod zoo;

pub use error::{FlowError, Result};
pub use model::{Constants, Flags, Lyapunov, LyapunovIndex, ModelSpec, Phi};
