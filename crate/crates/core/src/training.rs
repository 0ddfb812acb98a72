//! Joint training of the solution and source networks.
//!
//! Each epoch draws a residual mini-batch (fresh points and pairs unless
//! frozen), evaluates the empirical risk with exact gradients, and applies one
//! Adam step to each network with its own learning rate. Every random draw is
//! addressed by `(seed, purpose, epoch, index)`, so a run is a pure function of
//! its configuration.

use ndarray::{Array2, Axis};

use crate::benchmark::{make_measurements, relative_l2_on, test_points, ErrorReport, ProblemSpec};
use crate::error::{Error, Result};
use crate::field::NetField;
use crate::fractional::EstimatorConfig;
use crate::loss::{loss_gradients, LossInputs, LossReport, LossWeights, MeasurementSet, ResidualBatch};
use crate::nn::{adam_step, mlp_init_stream, AdamState, LrSchedule, MlpParams};
use crate::sampling::{sample_ball, sample_sphere_points, Purpose, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_residual: usize,
    pub lr_u: f64,
    pub lr_f: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub weights: LossWeights,
    pub estimator: EstimatorConfig,
    pub n_measure: usize,
    pub noise_delta: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub n_test: usize,
    /// Seed of the test-point stream; shared by all runs so errors are comparable.
    pub test_seed: u64,
    pub hard_boundary: bool,
    /// Boundary points per step for the soft boundary term (0 disables it).
    pub n_boundary: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Draw collocation points and pairs once and reuse them every epoch.
    pub frozen_pairs: bool,
    /// When positive, mini-batches are drawn from a fixed pool of this many points.
    pub collocation_pool: usize,
}

impl TrainConfig {
    /// Experiment defaults for a `d`-dimensional problem of order `alpha`.
    pub fn for_problem(problem: &ProblemSpec) -> Self {
        TrainConfig {
            epochs: 10_000,
            batch_residual: 256,
            lr_u: 1e-3,
            lr_f: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 4000,
            // with equal weights the residual term holds u near zero while f
            // is still small; weighting the data term lets u lead
            weights: LossWeights {
                data: 1000.0,
                ..LossWeights::default()
            },
            estimator: EstimatorConfig::new(problem.d, problem.alpha),
            n_measure: 1000,
            noise_delta: 0.01,
            seed: 0,
            eval_every: 100,
            n_test: 1000,
            test_seed: 0,
            hard_boundary: true,
            n_boundary: 0,
            hidden_layers: 4,
            hidden_width: 64,
            frozen_pairs: false,
            collocation_pool: 0,
        }
    }

    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        problem.validate()?;
        self.estimator.validate()?;
        self.weights.validate()?;
        if self.estimator.d != problem.d || self.estimator.alpha != problem.alpha {
            return Err(Error::param("estimator dimension/order differ from the problem"));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_residual == 0 || self.batch_residual >= 1 << 24 {
            return Err(Error::param("batch_residual must be in 1..2^24"));
        }
        if self.epochs >= 1 << 32 {
            return Err(Error::param("epochs must be below 2^32"));
        }
        for (name, lr) in [("lr_u", self.lr_u), ("lr_f", self.lr_f)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::param("lr_decay_factor must lie in (0, 1]"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::param("lr_decay_every must be positive"));
        }
        if self.n_measure == 0 {
            return Err(Error::param("n_measure must be positive"));
        }
        if !(self.noise_delta >= 0.0 && self.noise_delta < 1.0) {
            return Err(Error::param("noise_delta must lie in [0, 1)"));
        }
        if self.eval_every == 0 || self.n_test == 0 {
            return Err(Error::param("eval_every and n_test must be positive"));
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::param("networks need at least one hidden layer of positive width"));
        }
        if !self.hard_boundary && self.n_boundary == 0 && self.weights.boundary > 0.0 {
            return Err(Error::param("soft boundary term needs n_boundary > 0"));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, d: usize) -> Vec<usize> {
        let mut sizes = vec![d];
        sizes.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        sizes.push(1);
        sizes
    }

    fn schedule(&self, base: f64) -> LrSchedule {
        LrSchedule {
            base,
            decay_factor: self.lr_decay_factor,
            decay_every: self.lr_decay_every,
        }
    }
}

/// One logged epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub report: LossReport,
    pub re_u: f64,
    pub re_f: f64,
    pub lr_u: f64,
    pub lr_f: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub entries: Vec<TraceEntry>,
}

pub const TRACE_HEADER: &str = "epoch,total,equ,boundary,data,re_u,re_f,lr_u,lr_f";

impl TraceEntry {
    pub fn csv_line(&self) -> String {
        use crate::benchmark::fmt_f64 as f;
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            f(r.total),
            f(r.equ_term),
            f(r.boundary_term),
            f(r.data_term),
            f(self.re_u),
            f(self.re_f),
            f(self.lr_u),
            f(self.lr_f)
        )
    }
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&e.csv_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub epoch: u64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub u: MlpParams,
    pub f: MlpParams,
    pub u_adam: AdamState,
    pub f_adam: AdamState,
    pub trace: TrainTrace,
    /// Total loss of every completed epoch.
    pub loss_history: Vec<f64>,
    /// Set when training stopped early; parameters are the last finite state.
    pub divergence: Option<Divergence>,
}

impl TrainOutcome {
    pub fn final_errors(&self, problem: &ProblemSpec, cfg: &TrainConfig) -> Result<ErrorReport> {
        let tests = test_points(problem, cfg.n_test, cfg.test_seed);
        evaluate(self, problem, cfg, &tests)
    }
}

fn evaluate(out: &TrainOutcome, problem: &ProblemSpec, cfg: &TrainConfig, tests: &Array2<f64>) -> Result<ErrorReport> {
    let (re_u, re_f) = relative_errors(&out.u, &out.f, problem, cfg.hard_boundary, tests)?;
    Ok(ErrorReport {
        re_u,
        re_f,
        n_test: tests.nrows(),
        seed: cfg.seed,
    })
}

fn relative_errors(u: &MlpParams, f: &MlpParams, problem: &ProblemSpec, hard: bool, tests: &Array2<f64>) -> Result<(f64, f64)> {
    let re_u = relative_l2_on(&NetField::solution(u, hard), &problem.exact_solution(), tests)?;
    let re_f = relative_l2_on(&NetField::plain(f), &problem.exact_source(), tests)?;
    Ok((re_u, re_f))
}

/// Trains and converts an early stop into [`Error::TrainingDivergence`].
pub fn train(problem: &ProblemSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let out = run_training(problem, cfg, |_| {})?;
    match out.divergence {
        Some(d) => Err(Error::TrainingDivergence {
            epoch: d.epoch,
            reason: d.reason,
        }),
        None => Ok(out),
    }
}

fn select_rows(pool: &Array2<f64>, n: usize, rng: &mut RngStream) -> Array2<f64> {
    let idx: Vec<usize> = (0..n).map(|_| rng.index(pool.nrows())).collect();
    pool.select(Axis(0), &idx)
}

/// Runs the full loop, calling `observer` for every logged epoch. Divergence
/// is reported through [`TrainOutcome::divergence`] together with the last
/// finite parameters; invalid configurations are returned as errors.
pub fn run_training(
    problem: &ProblemSpec,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&TraceEntry),
) -> Result<TrainOutcome> {
    cfg.validate(problem)?;
    let d = problem.d;
    let sizes = cfg.layer_sizes(d);
    let seed = cfg.seed;
    let mut u = mlp_init_stream(&sizes, RngStream::for_purpose(seed, Purpose::InitSolution, 0, 0))?;
    let mut f = mlp_init_stream(&sizes, RngStream::for_purpose(seed, Purpose::InitSource, 0, 0))?;
    let mut u_adam = AdamState::new(&u, cfg.schedule(cfg.lr_u));
    let mut f_adam = AdamState::new(&f, cfg.schedule(cfg.lr_f));

    let measurements: MeasurementSet = make_measurements(problem, cfg.n_measure, cfg.noise_delta, seed)?;
    let tests = test_points(problem, cfg.n_test, cfg.test_seed);
    let frozen = if cfg.frozen_pairs {
        Some(ResidualBatch::sample(cfg.batch_residual, &cfg.estimator, seed, 0)?)
    } else {
        None
    };
    let pool = (cfg.collocation_pool > 0).then(|| {
        sample_ball(d, cfg.collocation_pool, &mut RngStream::for_purpose(seed, Purpose::Collocation, 0, 1))
    });
    let soft_boundary = !cfg.hard_boundary && cfg.n_boundary > 0;
    let frozen_boundary = (soft_boundary && cfg.frozen_pairs)
        .then(|| sample_sphere_points(d, cfg.n_boundary, &mut RngStream::for_purpose(seed, Purpose::Boundary, 0, 0)));

    let mut trace = TrainTrace::default();
    let mut loss_history = Vec::with_capacity(cfg.epochs as usize);
    let mut divergence = None;

    for epoch in 1..=cfg.epochs {
        let fresh;
        let batch = match (&frozen, &pool) {
            (Some(b), _) => b,
            (None, Some(pool)) => {
                let mut rng = RngStream::for_purpose(seed, Purpose::Minibatch, epoch, 0);
                let pts = select_rows(pool, cfg.batch_residual, &mut rng);
                fresh = ResidualBatch::with_fresh_pairs(pts, &cfg.estimator, seed, epoch)?;
                &fresh
            }
            (None, None) => {
                fresh = ResidualBatch::sample(cfg.batch_residual, &cfg.estimator, seed, epoch)?;
                &fresh
            }
        };
        let fresh_boundary;
        let boundary = match (&frozen_boundary, soft_boundary) {
            (Some(b), _) => b.view(),
            (None, true) => {
                let mut rng = RngStream::for_purpose(seed, Purpose::Boundary, epoch, 0);
                fresh_boundary = sample_sphere_points(d, cfg.n_boundary, &mut rng);
                fresh_boundary.view()
            }
            (None, false) => ndarray::ArrayView2::from_shape((0, d), &[]).expect("empty view"),
        };
        let inputs = LossInputs {
            batch,
            measurements: &measurements,
            boundary,
        };
        let lr_u = u_adam.current_lr();
        let lr_f = f_adam.current_lr();
        let grads = match loss_gradients(&u, &f, cfg.hard_boundary, &inputs, &cfg.estimator, &cfg.weights) {
            Ok(g) => g,
            Err(Error::TrainingDivergence { reason, .. }) => {
                divergence = Some(Divergence { epoch, reason });
                break;
            }
            Err(e) => return Err(e),
        };
        let (u_prev, f_prev) = (u.clone(), f.clone());
        let (ua_prev, fa_prev) = (u_adam.clone(), f_adam.clone());
        let stepped = adam_step(&mut u, &grads.solution, &mut u_adam)
            .and_then(|_| adam_step(&mut f, &grads.source, &mut f_adam));
        if stepped.is_err() || !u.is_finite() || !f.is_finite() {
            u = u_prev;
            f = f_prev;
            u_adam = ua_prev;
            f_adam = fa_prev;
            divergence = Some(Divergence {
                epoch,
                reason: "non-finite parameters after update".into(),
            });
            break;
        }
        let mut report = grads.report;
        report.epoch = epoch;
        loss_history.push(report.total);

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let (re_u, re_f) = relative_errors(&u, &f, problem, cfg.hard_boundary, &tests)?;
            let entry = TraceEntry {
                report,
                re_u,
                re_f,
                lr_u,
                lr_f,
            };
            observer(&entry);
            trace.entries.push(entry);
        }
    }

    Ok(TrainOutcome {
        u,
        f,
        u_adam,
        f_adam,
        trace,
        loss_history,
        divergence,
    })
}
