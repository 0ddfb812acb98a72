//! Empirical risk `w_equ L_equ + w_g L_g + w_u L_u` and its exact gradients.
//!
//! For every collocation point `x_i` and pair `P_j` the residual term needs the
//! solution field at `x_i` and at the eight shifted points
//! `x_i ± r ξ` (inner and outer radius, both halves of the pair). These
//! evaluation sites are laid out as one contiguous block per point:
//!
//! ```text
//! [x_i, (x-r_eps ξ, x+r_eps ξ, x-r_o ξ, x+r_o ξ, x-r_eps' ξ', x+r_eps' ξ', x-r_o' ξ', x+r_o' ξ') for j in 0..m]
//! ```
//!
//! Gradients are obtained by computing `∂L/∂u(y)` for every site `y` and
//! pushing the whole batch through one reverse pass of the network.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{boundary_factor, Field, NetField};
use crate::fractional::{ball_volume, sphere_area, Coefficients, EstimatorConfig};
use crate::nn::{GradBuffer, MlpParams};
use crate::sampling::{sample_ball, Purpose, RngStream, SamplePair};

/// Rows per forward/backward chunk. Fixed so that the reduction order, and
/// hence every bit of the gradient, does not depend on the thread count.
const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub equ: f64,
    pub boundary: f64,
    pub data: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            equ: 1.0,
            boundary: 0.0,
            data: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.equ, self.boundary, self.data];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::param("loss weights must be finite and non-negative"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::param("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Interior measurements `(x_k, u_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub points: Array2<f64>,
    pub values: Vec<f64>,
    pub noise_delta: f64,
}

impl MeasurementSet {
    pub fn new(points: Array2<f64>, values: Vec<f64>, noise_delta: f64) -> Result<Self> {
        if points.nrows() != values.len() {
            return Err(Error::shape(format!(
                "{} measurement points but {} values",
                points.nrows(),
                values.len()
            )));
        }
        Ok(MeasurementSet {
            points,
            values,
            noise_delta,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub equ_term: f64,
    pub boundary_term: f64,
    pub data_term: f64,
    pub epoch: u64,
}

impl LossReport {
    pub fn new(weights: &LossWeights, equ: f64, boundary: f64, data: f64, epoch: u64) -> Self {
        LossReport {
            total: weights.equ * equ + weights.boundary * boundary + weights.data * data,
            equ_term: equ,
            boundary_term: boundary,
            data_term: data,
            epoch,
        }
    }
}

/// Collocation points with an `N × m` grid of sample pairs (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBatch {
    pub points: Array2<f64>,
    pub pairs: Vec<SamplePair>,
    pub m: usize,
}

impl ResidualBatch {
    pub fn new(points: Array2<f64>, pairs: Vec<SamplePair>, m: usize) -> Result<Self> {
        if m == 0 || pairs.len() != points.nrows() * m {
            return Err(Error::shape(format!(
                "expected {} x {m} pairs, got {}",
                points.nrows(),
                pairs.len()
            )));
        }
        let d = points.ncols();
        if pairs.iter().any(|p| p.first.xi.len() != d || p.second.xi.len() != d) {
            return Err(Error::shape("pair direction dimension does not match points"));
        }
        Ok(ResidualBatch { points, pairs, m })
    }

    /// Draws pairs for the given points. Point `i` uses its own stream
    /// `(seed, Pairs, epoch, i)`.
    pub fn with_fresh_pairs(
        points: Array2<f64>,
        cfg: &EstimatorConfig,
        seed: u64,
        epoch: u64,
    ) -> Result<Self> {
        let mut pairs = Vec::with_capacity(points.nrows() * cfg.m);
        for i in 0..points.nrows() {
            let mut rng = RngStream::for_purpose(seed, Purpose::Pairs, epoch, i as u64);
            for _ in 0..cfg.m {
                pairs.push(cfg.pair(&mut rng)?);
            }
        }
        ResidualBatch::new(points, pairs, cfg.m)
    }

    /// `n` uniform collocation points in the unit ball plus fresh pairs.
    pub fn sample(n: usize, cfg: &EstimatorConfig, seed: u64, epoch: u64) -> Result<Self> {
        let mut rng = RngStream::for_purpose(seed, Purpose::Collocation, epoch, 0);
        let points = sample_ball(cfg.d, n, &mut rng);
        Self::with_fresh_pairs(points, cfg, seed, epoch)
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    fn sites_per_point(&self) -> usize {
        1 + 8 * self.m
    }

    fn n_sites(&self) -> usize {
        self.n_points() * self.sites_per_point()
    }

    /// All solution-field evaluation sites, one per row.
    pub fn sites(&self) -> Array2<f64> {
        let d = self.points.ncols();
        let mut out = Array2::zeros((self.n_sites(), d));
        let per = self.sites_per_point();
        for (i, x) in self.points.rows().into_iter().enumerate() {
            let base = i * per;
            out.row_mut(base).assign(&x);
            for j in 0..self.m {
                let pair = &self.pairs[i * self.m + j];
                let offs = base + 1 + 8 * j;
                for (h, draw) in [&pair.first, &pair.second].into_iter().enumerate() {
                    let radii = [draw.r_eps, draw.r_eps, draw.r_o, draw.r_o];
                    for (q, r) in radii.into_iter().enumerate() {
                        let sign = if q % 2 == 0 { -1.0 } else { 1.0 };
                        let mut row = out.row_mut(offs + 4 * h + q);
                        for k in 0..d {
                            row[k] = x[k] + sign * r * draw.xi[k];
                        }
                    }
                }
            }
        }
        out
    }

    /// Residual factors `(μ_ij, η_ij)` from solution values at every site and
    /// source values at the collocation points.
    fn factors(&self, u_sites: &[f64], f_points: &[f64], k: Coefficients) -> (Vec<f64>, Vec<f64>) {
        let per = self.sites_per_point();
        let mut mu = Vec::with_capacity(self.pairs.len());
        let mut eta = Vec::with_capacity(self.pairs.len());
        for i in 0..self.n_points() {
            let base = i * per;
            let c = u_sites[base];
            for j in 0..self.m {
                let pair = &self.pairs[i * self.m + j];
                let v = &u_sites[base + 1 + 8 * j..base + 9 + 8 * j];
                let half = |draw: &crate::sampling::Draw, w: &[f64]| {
                    k.k1 * (2.0 * c - w[0] - w[1]) / (draw.r_eps * draw.r_eps)
                        + k.k2 * (2.0 * c - w[2] - w[3])
                        - f_points[i]
                };
                mu.push(half(&pair.first, &v[0..4]));
                eta.push(half(&pair.second, &v[4..8]));
            }
        }
        (mu, eta)
    }
}

fn divergence(reason: impl Into<String>) -> Error {
    Error::TrainingDivergence {
        epoch: 0,
        reason: reason.into(),
    }
}

/// `|Ω| / (N m) Σ_ij μ(x_i, P_j) η(x_i, P_j)`. Unbiased for the squared
/// residual norm, so it may be negative.
pub fn loss_equ<U: Field + ?Sized, F: Field + ?Sized>(
    u: &U,
    f: &F,
    batch: &ResidualBatch,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    let k = cfg.coefficients()?;
    let sites = batch.sites();
    let u_sites = u.values(sites.view());
    let f_points = f.values(batch.points.view());
    let (mu, eta) = batch.factors(&u_sites, &f_points, k);
    let mean = mu.iter().zip(&eta).map(|(a, b)| a * b).sum::<f64>() / mu.len() as f64;
    let v = ball_volume(cfg.d) * mean;
    if !v.is_finite() {
        return Err(divergence("non-finite residual term"));
    }
    Ok(v)
}

/// `|Ω| / N_u Σ (u(x_k) - u_k)²`.
pub fn loss_data<U: Field + ?Sized>(u: &U, s: &MeasurementSet) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::param("measurement set is empty"));
    }
    let vals = u.values(s.points.view());
    let sse: f64 = vals.iter().zip(&s.values).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ball_volume(s.points.ncols()) * sse / s.len() as f64)
}

/// `|∂Ω| / N_g Σ u(y)²` over boundary points `ys`. Zero for an empty set.
pub fn loss_boundary<U: Field + ?Sized>(u: &U, ys: ArrayView2<'_, f64>) -> f64 {
    if ys.nrows() == 0 {
        return 0.0;
    }
    let vals = u.values(ys);
    sphere_area(ys.ncols()) * vals.iter().map(|v| v * v).sum::<f64>() / ys.nrows() as f64
}

/// Everything the empirical risk is evaluated on in one step.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub batch: &'a ResidualBatch,
    pub measurements: &'a MeasurementSet,
    /// Boundary points for the soft constraint; may have zero rows.
    pub boundary: ArrayView2<'a, f64>,
}

pub fn total_loss<U: Field + ?Sized, F: Field + ?Sized>(
    u: &U,
    f: &F,
    inputs: &LossInputs<'_>,
    cfg: &EstimatorConfig,
    weights: &LossWeights,
    epoch: u64,
) -> Result<LossReport> {
    let equ = loss_equ(u, f, inputs.batch, cfg)?;
    let boundary = loss_boundary(u, inputs.boundary);
    let data = loss_data(u, inputs.measurements)?;
    Ok(LossReport::new(weights, equ, boundary, data, epoch))
}

/// Result of [`loss_gradients`].
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub report: LossReport,
    pub solution: GradBuffer,
    pub source: GradBuffer,
}

/// Loss value and exact gradients with respect to the solution network
/// (`u`, optionally wrapped by `(1-|x|²)_+`) and the source network (`f`).
pub fn loss_gradients(
    u: &MlpParams,
    f: &MlpParams,
    hard_boundary: bool,
    inputs: &LossInputs<'_>,
    cfg: &EstimatorConfig,
    weights: &LossWeights,
) -> Result<LossGradients> {
    let k = cfg.coefficients()?;
    weights.validate()?;
    let batch = inputs.batch;
    let meas = inputs.measurements;
    if meas.is_empty() {
        return Err(Error::param("measurement set is empty"));
    }
    let d = cfg.d;
    if batch.points.ncols() != d || meas.points.ncols() != d || (inputs.boundary.nrows() > 0 && inputs.boundary.ncols() != d) {
        return Err(Error::shape("input dimension does not match estimator dimension"));
    }

    // All solution-field sites: residual sites, then measurements, then boundary.
    let residual_sites = batch.sites();
    let n_res = residual_sites.nrows();
    let n_meas = meas.len();
    let n_bnd = inputs.boundary.nrows();
    let all_sites = ndarray::concatenate(
        Axis(0),
        &[residual_sites.view(), meas.points.view(), inputs.boundary],
    )
    .expect("same column count");
    let factors: Vec<f64> = all_sites
        .rows()
        .into_iter()
        .map(|r| {
            if hard_boundary {
                boundary_factor(r.as_slice().expect("row-major"))
            } else {
                1.0
            }
        })
        .collect();
    let active: Vec<usize> = (0..factors.len()).filter(|&i| factors[i] != 0.0).collect();
    let active_sites = all_sites.select(Axis(0), &active);

    let chunks: Vec<(usize, usize)> = (0..active.len())
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(active.len())))
        .collect();
    let caches = chunks
        .par_iter()
        .map(|&(a, b)| u.forward_cached(active_sites.slice(s![a..b, ..])))
        .collect::<Result<Vec<_>>>()?;
    let mut u_vals = vec![0.0; factors.len()];
    for (&(a, _), cache) in chunks.iter().zip(&caches) {
        for (q, v) in cache.output().iter().enumerate() {
            let site = active[a + q];
            u_vals[site] = factors[site] * v;
        }
    }
    let f_cache = f.forward_cached(batch.points.view())?;
    let f_vals = f_cache.output().to_vec();

    let (mu, eta) = batch.factors(&u_vals[..n_res], &f_vals, k);
    let n_pairs = mu.len() as f64;
    let vol = ball_volume(d);
    let equ = vol * mu.iter().zip(&eta).map(|(a, b)| a * b).sum::<f64>() / n_pairs;
    let data = vol
        * u_vals[n_res..n_res + n_meas]
            .iter()
            .zip(&meas.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
        / n_meas as f64;
    let area = sphere_area(d);
    let boundary = if n_bnd == 0 {
        0.0
    } else {
        area * u_vals[n_res + n_meas..].iter().map(|v| v * v).sum::<f64>() / n_bnd as f64
    };
    let report = LossReport::new(weights, equ, boundary, data, 0);
    if !report.total.is_finite() {
        return Err(divergence("non-finite loss"));
    }

    // ∂L/∂u(site) and ∂L/∂f(x_i).
    let mut du = vec![0.0; factors.len()];
    let mut df = vec![0.0; batch.n_points()];
    let c = weights.equ * vol / n_pairs;
    let per = 1 + 8 * batch.m;
    for i in 0..batch.n_points() {
        let base = i * per;
        for j in 0..batch.m {
            let idx = i * batch.m + j;
            let pair = &batch.pairs[idx];
            // d(μη) = η dμ + μ dη
            let halves = [(&pair.first, c * eta[idx]), (&pair.second, c * mu[idx])];
            for (h, (draw, g)) in halves.into_iter().enumerate() {
                let inner = k.k1 / (draw.r_eps * draw.r_eps);
                du[base] += 2.0 * g * (inner + k.k2);
                let offs = base + 1 + 8 * j + 4 * h;
                du[offs] -= g * inner;
                du[offs + 1] -= g * inner;
                du[offs + 2] -= g * k.k2;
                du[offs + 3] -= g * k.k2;
                df[i] -= g;
            }
        }
    }
    let cd = weights.data * vol * 2.0 / n_meas as f64;
    for (q, target) in meas.values.iter().enumerate() {
        du[n_res + q] += cd * (u_vals[n_res + q] - target);
    }
    if n_bnd > 0 {
        let cb = weights.boundary * area * 2.0 / n_bnd as f64;
        for q in n_res + n_meas..factors.len() {
            du[q] += cb * u_vals[q];
        }
    }

    let partials = chunks
        .par_iter()
        .zip(&caches)
        .map(|(&(a, b), cache)| {
            let upstream: Vec<f64> = active[a..b].iter().map(|&s| du[s] * factors[s]).collect();
            let mut g = GradBuffer::zeros_like(u);
            u.backward_cached(cache, &upstream, &mut g).map(|_| g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut solution = GradBuffer::zeros_like(u);
    for g in &partials {
        solution.add_assign(g);
    }
    let mut source = GradBuffer::zeros_like(f);
    f.backward_cached(&f_cache, &df, &mut source)?;
    if !solution.is_finite() || !source.is_finite() {
        return Err(divergence("non-finite gradient"));
    }
    Ok(LossGradients {
        report,
        solution,
        source,
    })
}

/// Loss of two networks through the generic field path. Used as the
/// reference objective for gradient checks.
pub fn network_loss(
    u: &MlpParams,
    f: &MlpParams,
    hard_boundary: bool,
    inputs: &LossInputs<'_>,
    cfg: &EstimatorConfig,
    weights: &LossWeights,
) -> Result<LossReport> {
    total_loss(
        &NetField::solution(u, hard_boundary),
        &NetField::plain(f),
        inputs,
        cfg,
        weights,
        0,
    )
}
