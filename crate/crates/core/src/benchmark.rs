//! Unit-ball benchmark: closed-form solution and source, noisy measurements,
//! relative L² errors, error tables and grid dumps.
//!
//! `u*(x) = (1 - |x|²)_+^{1+α/2}` solves `(-Δ)^{α/2} u = f*` with
//! `f*(x) = 2^α Γ(α/2 + 2) Γ((α+d)/2) / Γ(d/2) · (1 - (1 + α/d)|x|²)`.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::fractional::log_gamma;
use crate::loss::MeasurementSet;
use crate::sampling::{sample_ball, sample_gaussian, Purpose, RngStream};
use crate::training::{train, TrainConfig};

/// Fractional Poisson problem on the unit ball of R^d.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProblemSpec {
    pub d: usize,
    pub alpha: f64,
}

impl ProblemSpec {
    pub fn new(d: usize, alpha: f64) -> Result<Self> {
        let p = ProblemSpec { d, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::param("dimension must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::param(format!("alpha must lie in (0, 2), got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn exact_solution(&self) -> ExactSolution {
        ExactSolution { alpha: self.alpha }
    }

    pub fn exact_source(&self) -> ExactSource {
        ExactSource::new(self.d, self.alpha)
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum()
}

/// `u*(x) = (1 - |x|²)_+^{1+α/2}`.
pub fn exact_u(x: &[f64], alpha: f64) -> f64 {
    let t = 1.0 - norm2(x);
    if t <= 0.0 {
        0.0
    } else {
        t.powf(1.0 + 0.5 * alpha)
    }
}

/// Leading constant of `f*`: `2^α Γ(α/2+2) Γ((α+d)/2) / Γ(d/2)`.
pub fn exact_f_scale(d: usize, alpha: f64) -> f64 {
    let dd = d as f64;
    let ln = alpha * 2f64.ln() + log_gamma(0.5 * alpha + 2.0).expect("positive")
        + log_gamma(0.5 * (alpha + dd)).expect("positive")
        - log_gamma(0.5 * dd).expect("positive");
    ln.exp()
}

/// `f*(x)`, defined on all of R^d.
pub fn exact_f(x: &[f64], d: usize, alpha: f64) -> f64 {
    exact_f_scale(d, alpha) * (1.0 - (1.0 + alpha / d as f64) * norm2(x))
}

#[derive(Clone, Copy, Debug)]
pub struct ExactSolution {
    pub alpha: f64,
}

impl Field for ExactSolution {
    fn value(&self, x: &[f64]) -> f64 {
        exact_u(x, self.alpha)
    }
}

/// `f*` with its constant precomputed.
#[derive(Clone, Copy, Debug)]
pub struct ExactSource {
    scale: f64,
    slope: f64,
}

impl ExactSource {
    pub fn new(d: usize, alpha: f64) -> Self {
        ExactSource {
            scale: exact_f_scale(d, alpha),
            slope: 1.0 + alpha / d as f64,
        }
    }
}

impl Field for ExactSource {
    fn value(&self, x: &[f64]) -> f64 {
        self.scale * (1.0 - self.slope * norm2(x))
    }
}

/// `n` uniform points in the ball with values `u*(x)(1 + δ ξ)`, `ξ ~ N(0,1)`.
pub fn make_measurements(spec: &ProblemSpec, n: usize, delta: f64, seed: u64) -> Result<MeasurementSet> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::param("at least one measurement is required"));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::param(format!("noise level must be non-negative, got {delta}")));
    }
    let points = sample_ball(spec.d, n, &mut RngStream::for_purpose(seed, Purpose::Measurements, 0, 0));
    let noise = sample_gaussian(n, &mut RngStream::for_purpose(seed, Purpose::Noise, 0, 0));
    let u = spec.exact_solution();
    let values = points
        .rows()
        .into_iter()
        .zip(&noise)
        .map(|(x, xi)| {
            let ux = u.value(x.as_slice().expect("row-major"));
            ux + delta * ux * xi
        })
        .collect();
    MeasurementSet::new(points, values, delta)
}

/// Fixed test set for relative errors.
pub fn test_points(spec: &ProblemSpec, n: usize, seed: u64) -> Array2<f64> {
    sample_ball(spec.d, n, &mut RngStream::for_purpose(seed, Purpose::TestPoints, 0, 0))
}

/// `sqrt(Σ (c - r)²) / sqrt(Σ r²)` over the rows of `points`.
pub fn relative_l2_on<C: Field + ?Sized, R: Field + ?Sized>(
    candidate: &C,
    reference: &R,
    points: &Array2<f64>,
) -> Result<f64> {
    if points.nrows() == 0 {
        return Err(Error::param("relative error needs at least one test point"));
    }
    let c = candidate.values(points.view());
    let r = reference.values(points.view());
    let num: f64 = c.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = r.iter().map(|b| b * b).sum();
    if den == 0.0 || !den.is_finite() {
        return Err(Error::UndefinedMetric("reference has zero norm on the test set".into()));
    }
    Ok((num / den).sqrt())
}

/// Relative L² error on `n_test` uniform points drawn from the test stream.
pub fn relative_l2<C: Field + ?Sized, R: Field + ?Sized>(
    candidate: &C,
    reference: &R,
    spec: &ProblemSpec,
    n_test: usize,
    seed: u64,
) -> Result<f64> {
    relative_l2_on(candidate, reference, &test_points(spec, n_test, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub re_u: f64,
    pub re_f: f64,
    pub n_test: usize,
    pub seed: u64,
}

/// What the rows of an error table vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Alpha,
    Dimension,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Diverged,
    Failed,
}

impl CellStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::Failed => "failed",
        }
    }
}

/// One trained run of a table cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRun {
    pub row_key: f64,
    pub delta: f64,
    pub seed: u64,
    pub epochs: u64,
    pub wall_seconds: f64,
    pub status: CellStatus,
    pub errors: Option<ErrorReport>,
}

/// A table cell: every seed of one `(row, delta)` combination.
#[derive(Clone, Debug, PartialEq)]
pub struct TableCell {
    pub row_key: f64,
    pub delta: f64,
    pub runs: Vec<CellRun>,
}

impl TableCell {
    fn ok_values(&self, pick: impl Fn(&ErrorReport) -> f64) -> Vec<f64> {
        let mut v: Vec<f64> = self.runs.iter().filter_map(|r| r.errors.as_ref()).map(pick).collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        v
    }

    pub fn median_re_f(&self) -> Option<f64> {
        median(&self.ok_values(|e| e.re_f))
    }

    pub fn median_re_u(&self) -> Option<f64> {
        median(&self.ok_values(|e| e.re_u))
    }

    /// `(min, max)` of Re_f over successful seeds.
    pub fn spread_re_f(&self) -> Option<(f64, f64)> {
        let v = self.ok_values(|e| e.re_f);
        Some((*v.first()?, *v.last()?))
    }

    pub fn status(&self) -> CellStatus {
        if self.runs.iter().any(|r| r.status == CellStatus::Ok) {
            CellStatus::Ok
        } else if self.runs.iter().any(|r| r.status == CellStatus::Diverged) {
            CellStatus::Diverged
        } else {
            CellStatus::Failed
        }
    }
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

#[derive(Clone, Debug)]
pub struct TableSpec {
    pub row_kind: RowKind,
    pub rows: Vec<f64>,
    pub deltas: Vec<f64>,
    pub seeds: usize,
    pub jobs: usize,
}

fn run_cell(base: &ProblemSpec, template: &TrainConfig, kind: RowKind, row: f64, delta: f64, seed: u64) -> CellRun {
    let start = Instant::now();
    let mut problem = *base;
    match kind {
        RowKind::Alpha => problem.alpha = row,
        RowKind::Dimension => problem.d = row as usize,
    }
    let mut cfg = template.clone();
    cfg.noise_delta = delta;
    cfg.seed = seed;
    cfg.estimator.d = problem.d;
    cfg.estimator.alpha = problem.alpha;
    let outcome = train(&problem, &cfg);
    let wall_seconds = start.elapsed().as_secs_f64();
    let (status, errors) = match outcome {
        Ok(out) => match out.final_errors(&problem, &cfg) {
            Ok(e) => (CellStatus::Ok, Some(e)),
            Err(_) => (CellStatus::Failed, None),
        },
        Err(Error::TrainingDivergence { .. }) => (CellStatus::Diverged, None),
        Err(_) => (CellStatus::Failed, None),
    };
    CellRun {
        row_key: row,
        delta,
        seed,
        epochs: cfg.epochs,
        wall_seconds,
        status,
        errors,
    }
}

/// Trains every `(row, delta, seed)` combination. Cells run on `spec.jobs`
/// worker threads; each cell derives all its streams from its own seed, so
/// results do not depend on the pool size.
pub fn run_table(base: &ProblemSpec, template: &TrainConfig, spec: &TableSpec) -> Result<Vec<TableCell>> {
    if spec.rows.is_empty() || spec.deltas.is_empty() || spec.seeds == 0 {
        return Err(Error::param("a table needs at least one row, one delta and one seed"));
    }
    let mut jobs = Vec::new();
    for &row in &spec.rows {
        for &delta in &spec.deltas {
            for s in 0..spec.seeds {
                jobs.push((row, delta, template.seed.wrapping_add(s as u64)));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs.max(1))
        .build()
        .map_err(|e| Error::param(format!("cannot build worker pool: {e}")))?;
    let runs: Vec<CellRun> = pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(row, delta, seed)| run_cell(base, template, spec.row_kind, row, delta, seed))
            .collect()
    });
    let mut cells = Vec::new();
    for chunk in runs.chunks(spec.seeds) {
        cells.push(TableCell {
            row_key: chunk[0].row_key,
            delta: chunk[0].delta,
            runs: chunk.to_vec(),
        });
    }
    Ok(cells)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub const TABLE_HEADER: &str = "row_key,delta,re_f,re_u,seed,epochs,wall_seconds,status";
pub const RUNS_HEADER: &str = TABLE_HEADER;

fn table_line(out: &mut String, row_key: f64, delta: f64, re: Option<(f64, f64)>, seed: u64, epochs: u64, wall: f64, status: CellStatus) {
    let (re_f, re_u) = match re {
        Some((f, u)) => (fmt_f64(f), fmt_f64(u)),
        None => (String::new(), String::new()),
    };
    writeln!(
        out,
        "{},{},{re_f},{re_u},{seed},{epochs},{:.3},{}",
        row_key,
        delta,
        wall,
        status.as_str()
    )
    .expect("write to string");
}

/// One line per cell; with several seeds `re_f`/`re_u` are medians and
/// `seed` is the first seed of the cell.
pub fn table_csv(cells: &[TableCell]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for c in cells {
        let re = c.median_re_f().zip(c.median_re_u());
        let wall: f64 = c.runs.iter().map(|r| r.wall_seconds).sum();
        let first = &c.runs[0];
        table_line(&mut out, c.row_key, c.delta, re, first.seed, first.epochs, wall, c.status());
    }
    out
}

/// One line per trained run.
pub fn runs_csv(cells: &[TableCell]) -> String {
    let mut out = String::from(RUNS_HEADER);
    out.push('\n');
    for r in cells.iter().flat_map(|c| &c.runs) {
        let re = r.errors.map(|e| (e.re_f, e.re_u));
        table_line(&mut out, r.row_key, r.delta, re, r.seed, r.epochs, r.wall_seconds, r.status);
    }
    out
}

/// Which 2-D plane of R^d a grid covers: coordinates 1 and 2 vary, the rest
/// are fixed to `fixed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSpec {
    pub fixed: Vec<f64>,
}

impl SliceSpec {
    /// `x_3 = 0.5`, remaining coordinates 0 (no fixed coordinates in 2-D).
    pub fn default_for(d: usize) -> Self {
        let mut fixed = vec![0.0; d.saturating_sub(2)];
        if let Some(first) = fixed.first_mut() {
            *first = 0.5;
        }
        SliceSpec { fixed }
    }
}

/// Regular grid of reconstructed and exact source values over a planar slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub resolution: usize,
    pub fixed: Vec<f64>,
    /// `(x1, x2, Some((f_hat, f_star)))` inside the domain, `None` outside.
    pub rows: Vec<(f64, f64, Option<(f64, f64)>)>,
}

impl Grid {
    pub fn header(&self) -> String {
        let mut h = String::from("x1,x2,f_hat,f_star,abs_err");
        for k in 0..self.fixed.len() {
            write!(h, ",x{}", k + 3).expect("write to string");
        }
        h
    }

    pub fn inside_count(&self) -> usize {
        self.rows.iter().filter(|r| r.2.is_some()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        let tail: String = self.fixed.iter().map(|v| format!(",{}", fmt_f64(*v))).collect();
        for (x1, x2, vals) in &self.rows {
            let body = match vals {
                Some((fh, fs)) => format!("{},{},{}", fmt_f64(*fh), fmt_f64(*fs), fmt_f64((fh - fs).abs())),
                None => ",,".to_string(),
            };
            writeln!(out, "{},{},{body}{tail}", fmt_f64(*x1), fmt_f64(*x2)).expect("write to string");
        }
        out
    }
}

/// Evaluates `field` and `f*` on a `resolution × resolution` grid over the
/// bounding square of the slice disc; points outside the unit ball are masked.
/// Returns `Ok(None)` when the slice misses the domain entirely.
pub fn dump_grid<F: Field + ?Sized>(
    field: &F,
    spec: &ProblemSpec,
    resolution: usize,
    slice: &SliceSpec,
) -> Result<Option<Grid>> {
    if resolution < 2 {
        return Err(Error::param("grid resolution must be at least 2"));
    }
    if spec.d < 2 {
        return Err(Error::param("grid dumps need at least two dimensions"));
    }
    if slice.fixed.len() != spec.d - 2 {
        return Err(Error::shape(format!(
            "slice fixes {} coordinates, expected {}",
            slice.fixed.len(),
            spec.d - 2
        )));
    }
    let rest = 1.0 - norm2(&slice.fixed);
    if rest <= 0.0 {
        return Ok(None);
    }
    let half = rest.sqrt();
    let exact = spec.exact_source();
    let step = 2.0 * half / (resolution - 1) as f64;
    let mut x = vec![0.0; spec.d];
    x[2..].copy_from_slice(&slice.fixed);
    let mut rows = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            x[0] = -half + i as f64 * step;
            x[1] = -half + j as f64 * step;
            let vals = if norm2(&x) <= 1.0 {
                Some((field.value(&x), exact.value(&x)))
            } else {
                None
            };
            rows.push((x[0], x[1], vals));
        }
    }
    Ok(Some(Grid {
        resolution,
        fixed: slice.fixed.clone(),
        rows,
    }))
}
