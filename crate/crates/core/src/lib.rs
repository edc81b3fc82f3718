//! Joint-stochastic-approximation random fields.
//!
//! An energy model `u_θ(x, y)` over observations and class labels is trained
//! jointly with a directed generator `q_φ(x, h)`. The generator proposes
//! samples, a short Langevin-style revision moves them toward high-potential
//! regions of the energy model, and both parameter sets are updated by
//! stochastic approximation from those revised samples.

pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mcmc;
pub mod nets;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
