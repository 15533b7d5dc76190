//! Triangular transport maps on the unit cube and the ODE velocity fields
//! that realize them.
//!
//! The crate is organised bottom-up:
//!
//! - [`density`]: tabulated densities, conditional CDFs and sampling;
//! - [`transport`]: Knothe–Rosenblatt maps, displacement interpolation and
//!   the spectrum check for non-crossing interpolation lines;
//! - [`velocity`]: the straight-line field of a map and a residual-network
//!   field with exact input Jacobians;
//! - [`flow`]: fixed-step RK4 for positions, log-determinants and the
//!   acceleration regularizer;
//! - [`objective`]: the regularized likelihood objective, its reverse-mode
//!   gradient and the training loop;
//! - [`metrics`]: divergences, Wasserstein distances and stability checks.

pub mod density;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod objective;
pub mod tape;
pub mod transport;
pub mod velocity;

pub use error::{FlowError, Result};
