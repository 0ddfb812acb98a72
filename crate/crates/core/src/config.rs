//! Run configuration: a flat `key = value` text format.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored and
//! each key may appear once. Command-line overrides use the same `key=value`
//! syntax and replace file values. `dim` and `alpha` are required; every other
//! key falls back to the experiment defaults.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::benchmark::ProblemSpec;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const KEYS: &[&str] = &[
    "dim",
    "alpha",
    "r0",
    "eps_clamp",
    "m_pairs",
    "batch_residual",
    "n_measure",
    "noise_delta",
    "epochs",
    "lr_u",
    "lr_f",
    "lr_decay_factor",
    "lr_decay_every",
    "w_equ",
    "w_g",
    "w_u",
    "hard_boundary",
    "seed",
    "eval_every",
    "n_test",
    "out_dir",
    "run_name",
    "hidden_layers",
    "hidden_width",
    "n_boundary",
    "frozen_pairs",
    "collocation_pool",
    "test_seed",
    "grid_resolution",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub run_name: String,
    pub grid_resolution: usize,
}

/// Key to (line, raw value). Line 0 marks a command-line override.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

fn config_err(line: usize, key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

fn split_assignment(text: &str, line: usize) -> Result<(String, String)> {
    let Some((k, v)) = text.split_once('=') else {
        return Err(config_err(line, text.trim(), "expected `key = value`"));
    };
    let key = k.trim();
    if key.is_empty() {
        return Err(config_err(line, "", "empty key"));
    }
    if !KEYS.contains(&key) {
        return Err(config_err(line, key, "unknown key"));
    }
    let value = v.trim();
    if value.is_empty() {
        return Err(config_err(line, key, "empty value"));
    }
    Ok((key.to_string(), value.to_string()))
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = split_assignment(body, i + 1)?;
            if let Some((first, _)) = raw.entries.get(&key) {
                return Err(config_err(i + 1, &key, format!("duplicate key (first set on line {first})")));
            }
            raw.entries.insert(key, (i + 1, value));
        }
        Ok(raw)
    }

    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = split_assignment(assignment, 0)?;
        self.entries.insert(key, (0, value));
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| config_err(*line, key, format!("cannot parse `{v}`"))),
        }
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| config_err(0, key, "missing required key"))
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(l, _)| *l)
    }

    pub fn build(&self) -> Result<RunConfig> {
        let d: usize = self.require("dim")?;
        let alpha: f64 = self.require("alpha")?;
        let problem = ProblemSpec::new(d, alpha).map_err(|e| {
            let key = if d == 0 { "dim" } else { "alpha" };
            config_err(self.line_of(key), key, e.to_string())
        })?;
        let mut t = TrainConfig::for_problem(&problem);
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = self.get($key)? {
                    $field = v;
                }
            };
        }
        set!("r0", t.estimator.r0);
        set!("eps_clamp", t.estimator.eps);
        set!("m_pairs", t.estimator.m);
        set!("batch_residual", t.batch_residual);
        set!("n_measure", t.n_measure);
        set!("noise_delta", t.noise_delta);
        set!("epochs", t.epochs);
        set!("lr_u", t.lr_u);
        set!("lr_f", t.lr_f);
        set!("lr_decay_factor", t.lr_decay_factor);
        set!("lr_decay_every", t.lr_decay_every);
        set!("w_equ", t.weights.equ);
        set!("w_g", t.weights.boundary);
        set!("w_u", t.weights.data);
        set!("hard_boundary", t.hard_boundary);
        set!("seed", t.seed);
        set!("eval_every", t.eval_every);
        set!("n_test", t.n_test);
        set!("hidden_layers", t.hidden_layers);
        set!("hidden_width", t.hidden_width);
        set!("n_boundary", t.n_boundary);
        set!("frozen_pairs", t.frozen_pairs);
        set!("collocation_pool", t.collocation_pool);
        set!("test_seed", t.test_seed);
        if !t.hard_boundary && t.n_boundary == 0 {
            t.n_boundary = 256;
        }
        let out_dir = self.get::<PathBuf>("out_dir")?.unwrap_or_else(|| PathBuf::from("out"));
        let run_name = self.get::<String>("run_name")?.unwrap_or_else(|| "run".to_string());
        let grid_resolution = self.get::<usize>("grid_resolution")?.unwrap_or(101);
        if grid_resolution < 2 {
            return Err(config_err(self.line_of("grid_resolution"), "grid_resolution", "must be at least 2"));
        }
        t.validate(&problem).map_err(|e| config_err(0, "", e.to_string()))?;
        Ok(RunConfig {
            problem,
            train: t,
            out_dir,
            run_name,
            grid_resolution,
        })
    }
}

/// Parses `text`, applies `overrides` in order, and validates the result.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut raw = RawConfig::parse(text)?;
    for o in overrides {
        raw.set_override(o)?;
    }
    raw.build()
}
