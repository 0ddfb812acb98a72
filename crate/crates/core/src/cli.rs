//! Command-line front end: `run`, `table`, `suggest` and `estimate`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::benchmark::{
    dump_grid, runs_csv, table_csv, ProblemSpec, RowKind, SliceSpec, TableSpec,
};
use crate::checkpoint;
use crate::config::{parse_config, RunConfig};
use crate::error::{Error, Result};
use crate::field::{Constant, Field, NetField};
use crate::fractional::{mc_frac_laplacian_estimate, EstimatorConfig};
use crate::sampling::{Purpose, RngStream};
use crate::theory::{suggest_params, RateConstants};
use crate::training::run_training;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mcfpinn", version, about = "Monte Carlo fractional PINN source recovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Config file with `key = value` lines.
    pub config: PathBuf,
    /// Override a config key, e.g. `--set epochs=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RowKindArg {
    Alpha,
    Dim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FieldArg {
    /// The closed-form benchmark solution.
    Exact,
    /// u = 0.
    Zero,
    /// A solution-network checkpoint (`--checkpoint`).
    Checkpoint,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write trace, errors, checkpoints and a grid dump.
    Run {
        #[command(flatten)]
        base: ConfigArgs,
        /// Worker threads for loss evaluation; results do not depend on it.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train a grid of (row, delta) cells and write table.csv.
    Table {
        #[command(flatten)]
        base: ConfigArgs,
        /// Row values: orders alpha or dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        rows: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        deltas: Vec<f64>,
        #[arg(long, value_enum, default_value = "alpha")]
        row_kind: RowKindArg,
        /// Seeds per cell; the cell reports the median.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Worker threads (cells run concurrently).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Suggest network size and sample count for a target accuracy.
    Suggest {
        #[arg(long, allow_hyphen_values = true)]
        eps: f64,
        #[arg(long)]
        dim: usize,
        #[arg(long, allow_hyphen_values = true)]
        zeta: f64,
        #[arg(long, default_value_t = 1.0)]
        c_depth: f64,
        #[arg(long, default_value_t = 1.0)]
        c_width: f64,
        #[arg(long, default_value_t = 1.0)]
        c_bound: f64,
        #[arg(long, default_value_t = 1.0)]
        c_samples: f64,
    },
    /// Monte Carlo estimate of the fractional Laplacian at one point.
    Estimate {
        /// Comma-separated coordinates.
        #[arg(long, allow_hyphen_values = true)]
        point: String,
        /// Take dim, alpha, r0, eps_clamp and seed from a config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum, default_value = "exact")]
        field: FieldArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the checkpoint without the (1-|x|^2)_+ wrapper.
        #[arg(long)]
        soft: bool,
        /// Number of Monte Carlo samples.
        #[arg(long, default_value_t = 10_000)]
        m: usize,
        #[arg(long)]
        r0: Option<f64>,
        #[arg(long)]
        eps_clamp: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses comma-separated finite coordinates.
pub fn parse_point(s: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let t = part.trim();
        let v: f64 = t
            .parse()
            .map_err(|_| Error::param(format!("cannot parse coordinate `{t}`")))?;
        if !v.is_finite() {
            return Err(Error::param(format!("coordinate `{t}` is not finite")));
        }
        out.push(v);
    }
    // |x|^2 must stay finite for the estimator's site arithmetic
    if !out.iter().map(|c| c * c).sum::<f64>().is_finite() {
        return Err(Error::param("point norm overflows"));
    }
    Ok(out)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = fs::read_to_string(&args.config).map_err(|e| Error::Config {
        line: 0,
        key: String::new(),
        message: format!("cannot read {}: {e}", args.config.display()),
    })?;
    let mut overrides = args.overrides.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &args.out {
        overrides.push(format!("out_dir={}", o.display()));
    }
    parse_config(&text, &overrides)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidParameter(_) | Error::InvalidShape(_) => EXIT_USAGE,
        Error::TrainingDivergence { .. } => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn cmd_run(args: &ConfigArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let cfg = load_config(args)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    let outcome = run_training(&cfg.problem, &cfg.train, |e| {
        let r = &e.report;
        let _ = writeln!(
            out,
            "epoch {} loss {:.6e} re_u {:.4e} re_f {:.4e}",
            r.epoch, r.total, e.re_u, e.re_f
        );
    })?;
    write_file(dir, "trace.csv", outcome.trace.to_csv())?;
    checkpoint::save(dir.join("u.ckpt"), &outcome.u, Some(&outcome.u_adam))?;
    checkpoint::save(dir.join("f.ckpt"), &outcome.f, Some(&outcome.f_adam))?;
    let errors = outcome.final_errors(&cfg.problem, &cfg.train)?;
    let completed = outcome.loss_history.len();
    let report = json!({
        "run_name": cfg.run_name,
        "dim": cfg.problem.d,
        "alpha": cfg.problem.alpha,
        "noise_delta": cfg.train.noise_delta,
        "seed": errors.seed,
        "re_u": errors.re_u,
        "re_f": errors.re_f,
        "n_test": errors.n_test,
        "epochs": cfg.train.epochs,
        "epochs_completed": completed,
        "diverged": outcome.divergence.is_some(),
        "divergence_reason": outcome.divergence.as_ref().map(|d| d.reason.clone()),
    });
    write_file(dir, "errors.json", serde_json::to_string_pretty(&report).expect("json") + "\n")?;
    if cfg.problem.d >= 2 {
        let f = NetField::plain(&outcome.f);
        if let Some(grid) = dump_grid(&f, &cfg.problem, cfg.grid_resolution, &SliceSpec::default_for(cfg.problem.d))? {
            write_file(dir, "grid.csv", grid.to_csv())?;
        }
    }
    writeln!(out, "re_u {:e} re_f {:e} -> {}", errors.re_u, errors.re_f, dir.display())?;
    if let Some(d) = outcome.divergence {
        return Err(Error::TrainingDivergence {
            epoch: d.epoch,
            reason: d.reason,
        });
    }
    Ok(EXIT_OK)
}

fn cmd_table(base: &ConfigArgs, spec: TableSpec, out: &mut (dyn Write + Send)) -> Result<i32> {
    let cfg = load_config(base)?;
    for &row in &spec.rows {
        let mut p = cfg.problem;
        match spec.row_kind {
            RowKind::Alpha => p.alpha = row,
            RowKind::Dimension => {
                if row.fract() != 0.0 || row < 1.0 {
                    return Err(Error::param(format!("dimension row {row} is not a positive integer")));
                }
                p.d = row as usize;
            }
        }
        p.validate()?;
    }
    for &delta in &spec.deltas {
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::param(format!("noise level {delta} outside [0, 1)")));
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let cells = crate::benchmark::run_table(&cfg.problem, &cfg.train, &spec)?;
    write_file(&cfg.out_dir, "table.csv", table_csv(&cells))?;
    write_file(&cfg.out_dir, "table_runs.csv", runs_csv(&cells))?;
    for c in &cells {
        match c.median_re_f() {
            Some(v) => writeln!(out, "{} {} re_f {:.3e}", c.row_key, c.delta, v)?,
            None => writeln!(out, "{} {} {}", c.row_key, c.delta, c.status().as_str())?,
        }
    }
    let any_ok = cells.iter().any(|c| c.median_re_f().is_some());
    Ok(if any_ok { EXIT_OK } else { EXIT_FAILURE })
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    point: &str,
    config: Option<&Path>,
    dim: Option<usize>,
    alpha: Option<f64>,
    field: FieldArg,
    ckpt: Option<&Path>,
    soft: bool,
    m: usize,
    r0: Option<f64>,
    eps_clamp: Option<f64>,
    seed: Option<u64>,
    out: &mut (dyn Write + Send),
) -> Result<i32> {
    let x = parse_point(point)?;
    let mut est = EstimatorConfig::new(x.len(), 1.0);
    let mut seed_value = 0;
    if let Some(path) = config {
        let text = fs::read_to_string(path)?;
        let c = parse_config(&text, &[])?;
        est = c.train.estimator;
        seed_value = c.train.seed;
    }
    if let Some(d) = dim {
        est.d = d;
    }
    if let Some(a) = alpha {
        est.alpha = a;
    } else if config.is_none() {
        return Err(Error::param("--alpha or --config is required"));
    }
    if let Some(v) = r0 {
        est.r0 = v;
    }
    if let Some(v) = eps_clamp {
        est.eps = v;
    }
    if let Some(s) = seed {
        seed_value = s;
    }
    est.m = m;
    est.validate()?;
    if x.len() != est.d {
        return Err(Error::shape(format!("point has {} coordinates, dimension is {}", x.len(), est.d)));
    }
    let problem = ProblemSpec::new(est.d, est.alpha)?;
    let mut rng = RngStream::for_purpose(seed_value, Purpose::Estimate, 0, 0);
    let loaded;
    let (estimate, reference) = match field {
        FieldArg::Exact => {
            let u = problem.exact_solution();
            let inside = x.iter().map(|c| c * c).sum::<f64>() < 1.0;
            let reference = inside.then(|| problem.exact_source().value(&x));
            (mc_frac_laplacian_estimate(&u, &x, &est, &mut rng)?, reference)
        }
        FieldArg::Zero => (mc_frac_laplacian_estimate(&Constant(0.0), &x, &est, &mut rng)?, Some(0.0)),
        FieldArg::Checkpoint => {
            let path = ckpt.ok_or_else(|| Error::param("--field checkpoint needs --checkpoint PATH"))?;
            loaded = checkpoint::load(path)?;
            if loaded.params.input_dim() != est.d {
                return Err(Error::shape("checkpoint input dimension differs from --dim"));
            }
            let u = NetField::solution(&loaded.params, !soft);
            (mc_frac_laplacian_estimate(&u, &x, &est, &mut rng)?, None)
        }
    };
    let report = json!({
        "point": x,
        "dim": est.d,
        "alpha": est.alpha,
        "m": est.m,
        "estimate": estimate.mean,
        "std_error": estimate.std_error,
        "reference": reference,
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("json"))?;
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli, out: &mut (dyn Write + Send)) -> Result<i32> {
    match cli.command {
        Command::Run { base, jobs } => match jobs {
            None => cmd_run(&base, out),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::param(format!("cannot build worker pool: {e}")))?
                .install(|| cmd_run(&base, out)),
        },
        Command::Table {
            base,
            rows,
            deltas,
            row_kind,
            seeds,
            jobs,
        } => {
            let spec = TableSpec {
                row_kind: match row_kind {
                    RowKindArg::Alpha => RowKind::Alpha,
                    RowKindArg::Dim => RowKind::Dimension,
                },
                rows,
                deltas,
                seeds,
                jobs,
            };
            cmd_table(&base, spec, out)
        }
        Command::Suggest {
            eps,
            dim,
            zeta,
            c_depth,
            c_width,
            c_bound,
            c_samples,
        } => {
            let c = RateConstants {
                c_depth,
                c_width,
                c_bound,
                c_samples,
            };
            let s = suggest_params(eps, dim, zeta, c)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&s).expect("json"))?;
            Ok(EXIT_OK)
        }
        Command::Estimate {
            point,
            config,
            dim,
            alpha,
            field,
            checkpoint,
            soft,
            m,
            r0,
            eps_clamp,
            seed,
        } => cmd_estimate(
            &point,
            config.as_deref(),
            dim,
            alpha,
            field,
            checkpoint.as_deref(),
            soft,
            m,
            r0,
            eps_clamp,
            seed,
            out,
        ),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit status.
pub fn run_cli<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
