//! Variational inference for nonlinear state-space models.
//!
//! The crate builds up from a reverse-mode autodiff tape ([`diffmath`]) to
//! reparameterized distributions ([`distributions`]), neural components
//! ([`networks`]), a sequential latent-variable model ([`model`]), filtering
//! sequential Monte Carlo ([`smc`]), a particle-smoothing variational
//! objective with backward simulation ([`svo`]), gradient estimators and
//! their signal-to-noise diagnostics ([`grad`]), synthetic dynamical systems
//! and dataset handling ([`systems`]), predictive evaluation ([`eval`]), and
//! closed-form/quadrature oracles for validating all of the above
//! ([`oracle`]).

pub mod diffmath;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod grad;
pub mod model;
pub mod networks;
pub mod oracle;
pub mod rng;
pub mod smc;
pub mod svo;
pub mod systems;

pub use error::{Error, Result};
