//! Parameter dictionary between the conformal-factor convention `(sigma, lambda)`
//! and the Liouville convention `(gamma, mu)`:
//! `phi = (gamma/2) X`, `sigma = sqrt(pi) gamma`, `lambda = pi mu gamma^2`.
//!
//! Time in the Liouville convention runs `2 pi` times faster.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// `(sigma, lambda)`, field `phi`.
    Phi,
    /// `(gamma, mu)`, field `X`.
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    PhiToX,
    XToPhi,
}

/// `(sigma, lambda) -> (gamma, mu)`.
pub fn phi_to_x(sigma: f64, lambda: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", "sigma <= 0"));
    }
    if !(lambda >= 0.0) {
        return Err(invalid("lambda", "lambda < 0"));
    }
    let gamma = sigma / PI.sqrt();
    Ok((gamma, lambda / (PI * gamma * gamma)))
}

/// `(gamma, mu) -> (sigma, lambda)`.
pub fn x_to_phi(gamma: f64, mu: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0) {
        return Err(invalid("gamma", "gamma <= 0"));
    }
    if !(mu >= 0.0) {
        return Err(invalid("mu", "mu < 0"));
    }
    Ok((PI.sqrt() * gamma, PI * mu * gamma * gamma))
}

pub fn convert_conventions(values: (f64, f64), direction: Direction) -> Result<(f64, f64)> {
    match direction {
        Direction::PhiToX => phi_to_x(values.0, values.1),
        Direction::XToPhi => x_to_phi(values.0, values.1),
    }
}

/// Liouville time corresponding to conformal-factor time `t`.
pub fn x_time(t: f64) -> f64 {
    2.0 * PI * t
}
