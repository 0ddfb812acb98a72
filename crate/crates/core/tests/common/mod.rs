//! Double-double reference implementation of the network and the empirical
//! risk, used as a low-noise finite-difference oracle.
//!
//! The residual term divides second differences by `r_eps²`, which turns the
//! last-bit rounding of plain f64 network evaluations into loss noise of the
//! same order as the finite-difference tolerance. Evaluating the reference in
//! ~106-bit arithmetic removes that noise without touching the step size.

#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

use mcfpinn::fractional::{ball_volume, sphere_area, Coefficients};
use mcfpinn::loss::{LossWeights, MeasurementSet, ResidualBatch};
use mcfpinn::nn::MlpParams;
use ndarray::ArrayView2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DD {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl DD {
    pub const ZERO: DD = DD { hi: 0.0, lo: 0.0 };
    pub const ONE: DD = DD { hi: 1.0, lo: 0.0 };
    const LN2: DD = DD {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn from(v: f64) -> DD {
        DD { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn norm(hi: f64, lo: f64) -> DD {
        let (hi, lo) = quick_two_sum(hi, lo);
        DD { hi, lo }
    }

    fn scale2(self, k: i32) -> DD {
        let s = 2f64.powi(k);
        DD {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn abs(self) -> DD {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn exp(self) -> DD {
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - DD::LN2 * DD::from(k)).scale2(-10);
        // Taylor series; |r| < 3.4e-4 so 12 terms reach double-double precision
        let mut term = DD::ONE;
        let mut sum = DD::ONE;
        for n in 1..=12 {
            term = term * r / DD::from(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale2(k as i32)
    }

    pub fn tanh(self) -> DD {
        let a = self.abs();
        let t = if a.hi > 40.0 {
            DD::ONE
        } else {
            let e = (a + a).exp();
            DD::ONE - DD::from(2.0) / (e + DD::ONE)
        };
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }
}

impl Neg for DD {
    type Output = DD;
    fn neg(self) -> DD {
        DD {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DD {
    type Output = DD;
    fn add(self, o: DD) -> DD {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        DD::norm(s, e + f)
    }
}

impl Sub for DD {
    type Output = DD;
    fn sub(self, o: DD) -> DD {
        self + (-o)
    }
}

impl Mul for DD {
    type Output = DD;
    fn mul(self, o: DD) -> DD {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        DD::norm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for DD {
    type Output = DD;
    fn div(self, o: DD) -> DD {
        let q1 = self.hi / o.hi;
        let r = self - o * DD::from(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * DD::from(q2);
        let q3 = r.hi / o.hi;
        DD::norm(q1, q2) + DD::from(q3)
    }
}

/// A tanh MLP with double-double parameters.
#[derive(Clone, Debug)]
pub struct DdNet {
    sizes: Vec<usize>,
    weights: Vec<Vec<DD>>,
    biases: Vec<Vec<DD>>,
}

impl DdNet {
    pub fn new(p: &MlpParams) -> Self {
        DdNet {
            sizes: p.layer_sizes().to_vec(),
            weights: p.weights().iter().map(|w| w.iter().map(|&v| DD::from(v)).collect()).collect(),
            biases: p.biases().iter().map(|b| b.iter().map(|&v| DD::from(v)).collect()).collect(),
        }
    }

    /// Adds `h` exactly to the parameter at `flat` (layer order, weights
    /// row-major then biases).
    pub fn perturbed(&self, mut flat: usize, h: f64) -> Self {
        let mut out = self.clone();
        for l in 0..out.weights.len() {
            let nw = out.weights[l].len();
            if flat < nw {
                out.weights[l][flat] = out.weights[l][flat] + DD::from(h);
                return out;
            }
            flat -= nw;
            let nb = out.biases[l].len();
            if flat < nb {
                out.biases[l][flat] = out.biases[l][flat] + DD::from(h);
                return out;
            }
            flat -= nb;
        }
        panic!("parameter index out of range");
    }

    pub fn eval(&self, x: &[f64]) -> DD {
        let mut h: Vec<DD> = x.iter().map(|&v| DD::from(v)).collect();
        let n_layers = self.weights.len();
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut next = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let mut acc = self.biases[l][o];
                for i in 0..n_in {
                    acc = acc + self.weights[l][o * n_in + i] * h[i];
                }
                next.push(if l + 1 < n_layers { acc.tanh() } else { acc });
            }
            h = next;
        }
        h[0]
    }
}

fn solution(u: &DdNet, hard: bool, x: &[f64]) -> DD {
    if !hard {
        return u.eval(x);
    }
    let mut s = DD::ONE;
    for &c in x {
        s = s - DD::from(c) * DD::from(c);
    }
    if s.hi <= 0.0 {
        DD::ZERO
    } else {
        s * u.eval(x)
    }
}

/// Total empirical risk in double-double arithmetic.
#[allow(clippy::too_many_arguments)]
pub fn dd_loss(
    u: &DdNet,
    f: &DdNet,
    hard: bool,
    batch: &ResidualBatch,
    meas: &MeasurementSet,
    boundary: ArrayView2<'_, f64>,
    k: Coefficients,
    w: &LossWeights,
) -> DD {
    let d = batch.points.ncols();
    let (k1, k2) = (DD::from(k.k1), DD::from(k.k2));
    let mut equ = DD::ZERO;
    let mut y = vec![0.0; d];
    for (i, x) in batch.points.rows().into_iter().enumerate() {
        let x = x.to_vec();
        let c = solution(u, hard, &x);
        let fx = f.eval(&x);
        for j in 0..batch.m {
            let pair = &batch.pairs[i * batch.m + j];
            let mut factors = [DD::ZERO; 2];
            for (h, draw) in [&pair.first, &pair.second].into_iter().enumerate() {
                let mut at = |r: f64, sign: f64| {
                    for q in 0..d {
                        y[q] = x[q] + sign * r * draw.xi[q];
                    }
                    solution(u, hard, &y)
                };
                let inner = c + c - at(draw.r_eps, -1.0) - at(draw.r_eps, 1.0);
                let outer = c + c - at(draw.r_o, -1.0) - at(draw.r_o, 1.0);
                let r2 = DD::from(draw.r_eps) * DD::from(draw.r_eps);
                factors[h] = k1 * inner / r2 + k2 * outer - fx;
            }
            equ = equ + factors[0] * factors[1];
        }
    }
    let equ = equ * DD::from(ball_volume(d)) / DD::from((batch.pairs.len()) as f64);

    let mut data = DD::ZERO;
    for (x, &v) in meas.points.rows().into_iter().zip(&meas.values) {
        let e = solution(u, hard, &x.to_vec()) - DD::from(v);
        data = data + e * e;
    }
    let data = data * DD::from(ball_volume(d)) / DD::from(meas.len() as f64);

    let mut bnd = DD::ZERO;
    if boundary.nrows() > 0 {
        for yb in boundary.rows() {
            let v = solution(u, hard, &yb.to_vec());
            bnd = bnd + v * v;
        }
        bnd = bnd * DD::from(sphere_area(d)) / DD::from(boundary.nrows() as f64);
    }
    DD::from(w.equ) * equ + DD::from(w.boundary) * bnd + DD::from(w.data) * data
}

/// Sanity check of the double-double kernels against f64 and exact identities.
pub fn self_check() -> bool {
    let mut ok = true;
    for x in [-3.0, -0.5, 0.0, 0.1, 1.0, 7.5] {
        ok &= (DD::from(x).exp().to_f64() - f64::exp(x)).abs() <= 2e-16 * f64::exp(x);
        ok &= (DD::from(x).tanh().to_f64() - f64::tanh(x)).abs() <= 2e-16;
    }
    let third = DD::ONE / DD::from(3.0);
    ok &= (third * DD::from(3.0) - DD::ONE).to_f64().abs() < 1e-31;
    ok &= (DD::ONE.exp().hi - std::f64::consts::E).abs() <= 3.0 * f64::EPSILON;
    ok
}
