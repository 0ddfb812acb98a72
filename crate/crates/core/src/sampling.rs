//! Random draws for the estimator and the experiment protocol.
//!
//! Every draw comes from an [`RngStream`], a ChaCha8 keystream addressed by
//! `(seed, stream id)`. Stream ids are composed from a [`Purpose`] tag, the
//! epoch and a point index, so the value of any draw depends only on where it
//! is used and never on evaluation order.

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// What a stream is used for. Occupies the top byte of a stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    InitSolution = 1,
    InitSource = 2,
    Collocation = 3,
    Pairs = 4,
    Measurements = 5,
    Noise = 6,
    TestPoints = 7,
    Boundary = 8,
    Estimate = 9,
    Minibatch = 10,
}

/// Packs `(purpose, epoch, index)` into a 64-bit stream id:
/// 8 bits purpose, 32 bits epoch, 24 bits index.
pub fn stream_id(purpose: Purpose, epoch: u64, index: u64) -> u64 {
    debug_assert!(epoch < 1 << 32 && index < 1 << 24);
    ((purpose as u64) << 56) | ((epoch & 0xFFFF_FFFF) << 24) | (index & 0xFF_FFFF)
}

/// Reproducible random stream. Identical `(seed, stream)` pairs yield identical
/// sequences; distinct stream ids select independent ChaCha keystreams.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn for_purpose(seed: u64, purpose: Purpose, epoch: u64, index: u64) -> Self {
        Self::new(seed, stream_id(purpose, epoch, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}

/// One draw of inner radius, outer radius and direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub r_eps: f64,
    pub r_o: f64,
    pub xi: Vec<f64>,
}

/// Two independent [`Draw`]s. The product of the residual factors evaluated on
/// the two halves is an unbiased estimate of the squared residual.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub first: Draw,
    pub second: Draw,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 2.0 {
        Ok(())
    } else {
        Err(Error::param(format!("alpha must lie in (0, 2), got {alpha}")))
    }
}

/// Uniform direction on the unit sphere S^{d-1} (normalized Gaussian vector).
pub fn sample_sphere(d: usize, rng: &mut RngStream) -> Vec<f64> {
    assert!(d >= 1, "sphere dimension must be at least 1");
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            v.iter_mut().for_each(|c| *c /= norm);
            return v;
        }
    }
}

/// Inverse CDF of `r_I / r0 ~ Beta(2 - alpha, 1)` followed by the clamp
/// `max(eps, r_I)`.
pub fn inner_radius_from_uniform(r0: f64, alpha: f64, eps: f64, u: f64) -> f64 {
    let r_i = r0 * u.powf(1.0 / (2.0 - alpha));
    r_i.max(eps)
}

/// Inverse CDF of `r0 / r_o ~ Beta(alpha, 1)`. `u` must be positive.
pub fn outer_radius_from_uniform(r0: f64, alpha: f64, u: f64) -> f64 {
    r0 / u.powf(1.0 / alpha)
}

pub fn sample_inner_radius(r0: f64, alpha: f64, eps: f64, rng: &mut RngStream) -> Result<f64> {
    check_alpha(alpha)?;
    if !(eps > 0.0 && eps < r0) {
        return Err(Error::param(format!(
            "clamp must satisfy 0 < eps < r0, got eps={eps}, r0={r0}"
        )));
    }
    // 1 - U lies in (0, 1], so r_I never collapses to exactly zero before the clamp.
    let u = 1.0 - rng.uniform();
    Ok(inner_radius_from_uniform(r0, alpha, eps, u))
}

pub fn sample_outer_radius(r0: f64, alpha: f64, rng: &mut RngStream) -> Result<f64> {
    check_alpha(alpha)?;
    if !(r0 > 0.0) {
        return Err(Error::param(format!("r0 must be positive, got {r0}")));
    }
    loop {
        let u = rng.uniform();
        if u > 0.0 {
            let r = outer_radius_from_uniform(r0, alpha, u);
            if r.is_finite() {
                return Ok(r);
            }
        }
    }
}

pub fn sample_draw(d: usize, r0: f64, alpha: f64, eps: f64, rng: &mut RngStream) -> Result<Draw> {
    let r_eps = sample_inner_radius(r0, alpha, eps, rng)?;
    let r_o = sample_outer_radius(r0, alpha, rng)?;
    let xi = sample_sphere(d, rng);
    Ok(Draw { r_eps, r_o, xi })
}

pub fn sample_pair(
    d: usize,
    r0: f64,
    alpha: f64,
    eps: f64,
    rng: &mut RngStream,
) -> Result<SamplePair> {
    let first = sample_draw(d, r0, alpha, eps, rng)?;
    let second = sample_draw(d, r0, alpha, eps, rng)?;
    Ok(SamplePair { first, second })
}

/// `n` points uniform in the closed unit ball of R^d, one per row.
/// Radius is drawn as `U^{1/d}` so the cost does not grow with `d`.
pub fn sample_ball(d: usize, n: usize, rng: &mut RngStream) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        let dir = sample_sphere(d, rng);
        let radius = rng.uniform().powf(1.0 / d as f64);
        for (o, c) in row.iter_mut().zip(dir) {
            *o = radius * c;
        }
    }
    out
}

/// `n` points on the unit sphere, one per row.
pub fn sample_sphere_points(d: usize, n: usize, rng: &mut RngStream) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        for (o, c) in row.iter_mut().zip(sample_sphere(d, rng)) {
            *o = c;
        }
    }
    out
}

pub fn sample_gaussian(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(stream: u64) -> RngStream {
        RngStream::new(42, stream)
    }

    #[test]
    fn sphere_draws_have_unit_norm() {
        let mut r = rng(1);
        for d in 1..=10 {
            for _ in 0..100 {
                let v = sample_sphere(d, &mut r);
                let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sphere_in_one_dimension_is_a_sign() {
        let mut r = rng(2);
        let mut seen = [false; 2];
        for _ in 0..200 {
            let v = sample_sphere(1, &mut r);
            assert!(v[0] == 1.0 || v[0] == -1.0);
            seen[(v[0] > 0.0) as usize] = true;
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn sphere_coordinates_have_zero_mean() {
        let n = 100_000;
        let mut r = rng(3);
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let v = sample_sphere(3, &mut r);
            for k in 0..3 {
                sums[k] += v[k];
            }
        }
        let bound = 4.0 / (n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() < bound, "{}", s / n as f64);
        }
    }

    #[test]
    fn inner_radius_inverse_cdf_points() {
        assert_eq!(inner_radius_from_uniform(0.3, 1.3, 0.01, 1.0), 0.3);
        let r = inner_radius_from_uniform(0.3, 1.0, 0.01, 0.25);
        assert!((r - 0.075).abs() < 1e-15);
        assert_eq!(inner_radius_from_uniform(0.3, 1.0, 0.1, 0.25), 0.1);
    }

    #[test]
    fn inner_radius_mean_matches_beta() {
        let (r0, alpha, n) = (0.3, 1.2, 100_000);
        let mut r = rng(4);
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_inner_radius(r0, alpha, 1e-12, &mut r).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let a = 2.0 - alpha;
        let expected = r0 * a / (a + 1.0);
        assert!((mean - expected).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn outer_radius_inverse_cdf_points() {
        assert_eq!(outer_radius_from_uniform(0.3, 0.7, 1.0), 0.3);
        assert!((outer_radius_from_uniform(0.3, 1.0, 0.5) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn outer_radius_trimmed_mean_matches_pareto() {
        // Pareto(alpha) on [r0, inf); mean of min(r, T) has the closed form
        // r0 * alpha/(alpha-1) * (1 - (r0/T)^(alpha-1)) + T * (r0/T)^alpha.
        let (r0, alpha, n, t) = (0.3, 1.5, 100_000, 30.0);
        let mut r = rng(5);
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_outer_radius(r0, alpha, &mut r).unwrap().min(t))
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let q: f64 = r0 / t;
        let expected = r0 * alpha / (alpha - 1.0) * (1.0 - q.powf(alpha - 1.0)) + t * q.powf(alpha);
        assert!((mean - expected).abs() < 5.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn alpha_outside_open_interval_is_rejected() {
        let mut r = rng(6);
        for alpha in [0.0, 2.0, -1.0, 2.5, f64::NAN] {
            assert!(sample_inner_radius(0.3, alpha, 0.01, &mut r).is_err());
            assert!(sample_outer_radius(0.3, alpha, &mut r).is_err());
        }
        assert!(sample_inner_radius(0.3, 1.0, 0.5, &mut r).is_err());
    }

    #[test]
    fn pairs_respect_invariants_and_differ() {
        let mut r = rng(7);
        let a = sample_pair(3, 0.3, 1.5, 0.01, &mut r).unwrap();
        let b = sample_pair(3, 0.3, 1.5, 0.01, &mut r).unwrap();
        assert_ne!(a, b);
        for p in [&a, &b] {
            for h in [&p.first, &p.second] {
                assert!(h.r_eps >= 0.01 && h.r_eps <= 0.3);
                assert!(h.r_o >= 0.3);
                let n = h.xi.iter().map(|c| c * c).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_halves_are_uncorrelated() {
        let n = 100_000;
        let mut r = rng(8);
        let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let p = sample_pair(2, 0.3, 1.0, 0.01, &mut r).unwrap();
            a.push(p.first.r_eps);
            b.push(p.second.r_eps);
        }
        assert!(correlation(&a, &b).abs() < 0.02);
    }

    #[test]
    fn ball_points_are_inside_and_uniform() {
        let n = 100_000;
        let mut r = rng(9);
        let pts = sample_ball(2, n, &mut r);
        let mut inner = 0usize;
        for row in pts.rows() {
            let n2: f64 = row.iter().map(|c| c * c).sum();
            assert!(n2 <= 1.0 + 1e-15);
            if n2 <= 0.25 {
                inner += 1;
            }
        }
        let p = 0.25;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((inner as f64 / n as f64 - p).abs() < 3.0 * se);
        assert_eq!(sample_ball(4, 0, &mut r).nrows(), 0);
    }

    #[test]
    fn gaussian_moments() {
        let n = 1_000_000;
        let xs = sample_gaussian(n, &mut rng(10));
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.004);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn streams_are_reproducible_and_independent() {
        let a = sample_gaussian(1000, &mut rng(11));
        let b = sample_gaussian(1000, &mut rng(11));
        assert_eq!(a, b);
        let n = 100_000;
        let x = sample_gaussian(n, &mut rng(12));
        let y = sample_gaussian(n, &mut rng(13));
        assert!(correlation(&x, &y).abs() < 0.01);
    }

    #[test]
    fn stream_ids_do_not_collide_across_fields() {
        let a = stream_id(Purpose::Pairs, 1, 0);
        let b = stream_id(Purpose::Pairs, 0, 1);
        let c = stream_id(Purpose::Collocation, 1, 0);
        assert!(a != b && a != c && b != c);
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }
}
