//! Stochastic Ricci flow on the flat torus.
//!
//! The crate is organised bottom-up: [`lattice`] (geometry and spectral
//! calculus), [`gff`] (free field sampling), [`gmc`] (chaos measures),
//! [`srf`] (time stepping of the flow), [`totalmass`] (the one-dimensional
//! total-area diffusion), [`verify`] (Monte Carlo checks of the integral
//! identities) and [`expansion`] (small-noise expansion).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conventions;
pub mod ensemble;
pub mod error;
pub mod expansion;
pub mod gff;
pub mod gmc;
pub mod lattice;
pub mod rng;
pub mod srf;
pub mod stats;
pub mod totalmass;
pub mod verify;

pub use error::{Error, Result};
