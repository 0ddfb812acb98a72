//! Monte Carlo estimation of the fractional Laplacian
//! `(-Δ)^{α/2} u(x) = C(d,α) P.V. ∫ (u(x) - u(y)) / |x - y|^{d+α} dy`.
//!
//! The integral is split at radius `r0`. Inside the ball the symmetric second
//! difference is divided by `r²` and the radius is drawn from
//! `r / r0 ~ Beta(2-α, 1)`, clamped below at `eps`; outside, the radius is drawn
//! from `r0 / r ~ Beta(α, 1)`. With `k1`, `k2` as in [`Coefficients`] one
//! sample reads
//!
//! ```text
//! k1 * (2u(x) - u(x - r_eps ξ) - u(x + r_eps ξ)) / r_eps² + k2 * (2u(x) - u(x - r_o ξ) - u(x + r_o ξ))
//! ```

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::sampling::{sample_draw, Draw, RngStream, SamplePair};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(z)` for `z > 0` (Lanczos, g = 7, with reflection below 1/2).
pub fn log_gamma(z: f64) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::param(format!("log_gamma needs a positive finite argument, got {z}")));
    }
    Ok(ln_gamma_pos(z))
}

fn ln_gamma_pos(z: f64) -> f64 {
    if z < 0.5 {
        return (PI / (PI * z).sin()).ln() - ln_gamma_pos(1.0 - z);
    }
    let x = z - 1.0;
    let mut series = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        series += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

/// `Γ(z)` for `z > 0`.
pub fn gamma(z: f64) -> Result<f64> {
    log_gamma(z).map(f64::exp)
}

fn check_order(d: usize, alpha: f64) -> Result<()> {
    if d == 0 {
        return Err(Error::param("dimension must be at least 1"));
    }
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::param(format!("alpha must lie in (0, 2), got {alpha}")));
    }
    Ok(())
}

/// `C(d,α) = 2^α Γ((α+d)/2) / (π^{d/2} |Γ(-α/2)|)`, with
/// `|Γ(-α/2)| = π / (sin(πα/2) Γ(1+α/2))`.
pub fn fractional_constant(d: usize, alpha: f64) -> Result<f64> {
    check_order(d, alpha)?;
    let dd = d as f64;
    let log_mag = alpha * 2f64.ln() + ln_gamma_pos(0.5 * (alpha + dd)) + ln_gamma_pos(1.0 + 0.5 * alpha)
        - (0.5 * dd + 1.0) * PI.ln();
    Ok(log_mag.exp() * (0.5 * PI * alpha).sin())
}

/// `|S^{d-1}| = 2 π^{d/2} / Γ(d/2)`.
pub fn sphere_area(d: usize) -> f64 {
    assert!(d >= 1, "dimension must be at least 1");
    let h = 0.5 * d as f64;
    2.0 * (h * PI.ln() - ln_gamma_pos(h)).exp()
}

/// Volume of the unit ball, `π^{d/2} / Γ(d/2 + 1)`.
pub fn ball_volume(d: usize) -> f64 {
    assert!(d >= 1, "dimension must be at least 1");
    let h = 0.5 * d as f64;
    (h * PI.ln() - ln_gamma_pos(h + 1.0)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub d: usize,
    pub alpha: f64,
    pub r0: f64,
    pub eps: f64,
    /// Pairs per collocation point.
    pub m: usize,
}

impl EstimatorConfig {
    pub fn new(d: usize, alpha: f64) -> Self {
        EstimatorConfig {
            d,
            alpha,
            r0: 0.3,
            eps: 0.01,
            m: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_order(self.d, self.alpha)?;
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(Error::param(format!("r0 must be positive, got {}", self.r0)));
        }
        if !(self.eps > 0.0 && self.eps < self.r0) {
            return Err(Error::param(format!(
                "eps must satisfy 0 < eps < r0, got {}",
                self.eps
            )));
        }
        if self.m == 0 {
            return Err(Error::param("m must be at least 1"));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Result<Coefficients> {
        self.validate()?;
        let c = fractional_constant(self.d, self.alpha)? * sphere_area(self.d);
        Ok(Coefficients {
            k1: c * self.r0.powf(2.0 - self.alpha) / (2.0 * (2.0 - self.alpha)),
            k2: c * self.r0.powf(-self.alpha) / (2.0 * self.alpha),
        })
    }

    pub fn draw(&self, rng: &mut RngStream) -> Result<Draw> {
        sample_draw(self.d, self.r0, self.alpha, self.eps, rng)
    }

    pub fn pair(&self, rng: &mut RngStream) -> Result<SamplePair> {
        Ok(SamplePair {
            first: self.draw(rng)?,
            second: self.draw(rng)?,
        })
    }
}

/// Prefactors of the inner and outer terms:
/// `k1 = C |S^{d-1}| r0^{2-α} / (2(2-α))`, `k2 = C |S^{d-1}| r0^{-α} / (2α)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub k1: f64,
    pub k2: f64,
}

fn shifted(x: &[f64], r: f64, xi: &[f64], sign: f64, out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(x).zip(xi) {
        *o = a + sign * r * b;
    }
}

/// `2u(x) - u(x - rξ) - u(x + rξ)`.
pub fn second_difference<U: Field + ?Sized>(u: &U, x: &[f64], r: f64, xi: &[f64]) -> f64 {
    let mut y = vec![0.0; x.len()];
    shifted(x, r, xi, -1.0, &mut y);
    let minus = u.value(&y);
    shifted(x, r, xi, 1.0, &mut y);
    let plus = u.value(&y);
    2.0 * u.value(x) - minus - plus
}

/// One-draw estimate of `(-Δ)^{α/2} u(x)`, given `u(x)`.
fn draw_sample<U: Field + ?Sized>(u: &U, x: &[f64], ux: f64, draw: &Draw, k: Coefficients, y: &mut [f64]) -> f64 {
    shifted(x, draw.r_eps, &draw.xi, -1.0, y);
    let a = u.value(y);
    shifted(x, draw.r_eps, &draw.xi, 1.0, y);
    let b = u.value(y);
    shifted(x, draw.r_o, &draw.xi, -1.0, y);
    let c = u.value(y);
    shifted(x, draw.r_o, &draw.xi, 1.0, y);
    let e = u.value(y);
    k.k1 * (2.0 * ux - a - b) / (draw.r_eps * draw.r_eps) + k.k2 * (2.0 * ux - c - e)
}

/// Sample mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte Carlo estimate of `(-Δ)^{α/2} u(x)` from `cfg.m` draws.
pub fn mc_frac_laplacian<U: Field + ?Sized>(
    u: &U,
    x: &[f64],
    cfg: &EstimatorConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    mc_frac_laplacian_estimate(u, x, cfg, rng).map(|e| e.mean)
}

pub fn mc_frac_laplacian_estimate<U: Field + ?Sized>(
    u: &U,
    x: &[f64],
    cfg: &EstimatorConfig,
    rng: &mut RngStream,
) -> Result<Estimate> {
    let k = cfg.coefficients()?;
    if x.len() != cfg.d {
        return Err(Error::shape(format!("point has dimension {}, expected {}", x.len(), cfg.d)));
    }
    let ux = u.value(x);
    let mut y = vec![0.0; x.len()];
    // Welford accumulation keeps the variance stable over 10^6+ samples.
    let (mut mean, mut m2) = (0.0, 0.0);
    for j in 0..cfg.m {
        let draw = cfg.draw(rng)?;
        let s = draw_sample(u, x, ux, &draw, k, &mut y);
        if !s.is_finite() {
            return Err(Error::EstimatorFailure(format!(
                "non-finite sample at draw {j} (r_eps={}, r_o={})",
                draw.r_eps, draw.r_o
            )));
        }
        let delta = s - mean;
        mean += delta / (j + 1) as f64;
        m2 += delta * (s - mean);
    }
    let std_error = if cfg.m > 1 {
        (m2 / (cfg.m - 1) as f64 / cfg.m as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(Estimate {
        mean,
        std_error,
        samples: cfg.m,
    })
}

/// Single-draw residual factor: the one-draw estimate of `L(u)(x)` minus `f(x)`.
/// `f(x)` is subtracted once, outside both prefactors, so that its expectation
/// is the residual `L(u)(x) - f(x)`.
pub fn residual_factor<U: Field + ?Sized, F: Field + ?Sized>(
    u: &U,
    f: &F,
    x: &[f64],
    draw: &Draw,
    k: Coefficients,
) -> f64 {
    let mut y = vec![0.0; x.len()];
    draw_sample(u, x, u.value(x), draw, k, &mut y) - f.value(x)
}

/// `μ(x, first half) · η(x, second half)`: unbiased for the squared residual.
pub fn residual_product<U: Field + ?Sized, F: Field + ?Sized>(
    u: &U,
    f: &F,
    x: &[f64],
    pair: &SamplePair,
    k: Coefficients,
) -> f64 {
    residual_factor(u, f, x, &pair.first, k) * residual_factor(u, f, x, &pair.second, k)
}
