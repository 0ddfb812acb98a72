//! Network size and sample count suggested by the convergence-rate bound.
//!
//! The bound only fixes exponents; the multiplicative constants are unknown
//! and default to 1, so outputs are order-of-magnitude guidance.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateConstants {
    pub c_depth: f64,
    pub c_width: f64,
    pub c_bound: f64,
    pub c_samples: f64,
}

impl Default for RateConstants {
    fn default() -> Self {
        RateConstants {
            c_depth: 1.0,
            c_width: 1.0,
            c_bound: 1.0,
            c_samples: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateSuggestion {
    pub depth: u64,
    pub width: u64,
    pub weight_bound: f64,
    /// Saturates at `u64::MAX` for extreme targets.
    pub n_samples: u64,
    pub eps_target: f64,
    pub zeta: f64,
    pub dim: usize,
    #[serde(flatten)]
    pub constants: RateConstants,
    pub guidance_only: bool,
}

pub fn width_exponent(d: usize, zeta: f64) -> f64 {
    d as f64 / (1.0 - zeta)
}

pub fn bound_exponent(d: usize, zeta: f64) -> f64 {
    (9.0 * d as f64 + 8.0) / (2.0 - 2.0 * zeta)
}

pub fn sample_exponent(d: usize, zeta: f64) -> f64 {
    (23.0 * d as f64 + 18.0 - 2.0 * zeta) / (1.0 - zeta)
}

fn ceil_count(v: f64) -> u64 {
    // `as` saturates on overflow and infinity
    (v.ceil() as u64).max(1)
}

pub fn suggest_params(eps: f64, d: usize, zeta: f64, c: RateConstants) -> Result<RateSuggestion> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::param(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::param(format!("zeta must lie in (0, 1), got {zeta}")));
    }
    if d == 0 {
        return Err(Error::param("dimension must be at least 1"));
    }
    for (name, v) in [
        ("c_depth", c.c_depth),
        ("c_width", c.c_width),
        ("c_bound", c.c_bound),
        ("c_samples", c.c_samples),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::param(format!("{name} must be positive and finite")));
        }
    }
    let inv = 1.0 / eps;
    Ok(RateSuggestion {
        depth: ceil_count(c.c_depth * ((d + 1) as f64).ln()),
        width: ceil_count(c.c_width * inv.powf(width_exponent(d, zeta))),
        weight_bound: (c.c_bound * inv.powf(bound_exponent(d, zeta))).max(1.0),
        n_samples: ceil_count(c.c_samples * inv.powf(sample_exponent(d, zeta))),
        eps_target: eps,
        zeta,
        dim: d,
        constants: c,
        guidance_only: true,
    })
}
