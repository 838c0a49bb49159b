//! Flat `key = value` run configuration.
//!
//! Every key is optional except `dataset` and `output`. `preset = "desk"`
//! swaps in small defaults before the remaining keys are applied; explicit
//! keys always win over the preset.

use std::path::PathBuf;

use thiserror::Error;

use crate::adapt::DEFAULT_BLOCK_ROWS;
use crate::graph::Precision;
use crate::metatrain::TrainOptions;
use crate::nf::{Activation, Head, ModelSpec};
use crate::scoring::Scorer;

pub const PRECISION_ENV: &str = "FIELDMETA_PRECISION";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    Unknown(Vec<String>),
    #[error("missing config keys: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("`{key}` must be {expected}")]
    Type { key: String, expected: &'static str },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub preset: Preset,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub seed: u64,

    pub hidden_dim: usize,
    pub depth: usize,
    /// `sine` or `relu_fourier`.
    pub activation: String,
    pub omega0: f64,
    pub fourier_sigma: f64,
    pub fourier_features: usize,
    /// `linear` or `sigmoid`.
    pub head: String,

    pub k: usize,
    pub l: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub alpha_init: f64,

    pub outer_steps: usize,
    pub batch_size: usize,
    pub scorer: Scorer,
    pub first_order: bool,
    /// Write a checkpoint every this many outer steps (0: only at the end).
    pub checkpoint_every: usize,
    pub test_fraction: f64,
    pub block_rows: usize,
}

impl Config {
    /// Defaults of the full-size setting; `dataset` and `output` are empty.
    pub fn full() -> Self {
        Config {
            preset: Preset::Full,
            dataset: PathBuf::new(),
            output: PathBuf::new(),
            seed: 0,
            hidden_dim: 256,
            depth: 5,
            activation: "sine".into(),
            omega0: 30.0,
            fourier_sigma: 10.0,
            fourier_features: 128,
            head: "linear".into(),
            k: 16,
            l: 5,
            gamma: 0.25,
            lambda: 100.0,
            beta: 1e-5,
            alpha_init: 1e-2,
            outer_steps: 150_000,
            batch_size: 8,
            scorer: Scorer::GradNcp,
            first_order: false,
            checkpoint_every: 1000,
            test_fraction: 0.1,
            block_rows: DEFAULT_BLOCK_ROWS,
        }
    }

    /// Small model and short run for laptop CPUs.
    pub fn desk() -> Self {
        Config {
            preset: Preset::Desk,
            hidden_dim: 64,
            depth: 3,
            k: 8,
            beta: 1e-4,
            outer_steps: 300,
            batch_size: 4,
            checkpoint_every: 100,
            test_fraction: 0.2,
            ..Config::full()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.message().to_string()))?;

        let unknown: Vec<String> = table.keys().filter(|k| !KEYS.contains(&k.as_str())).cloned().collect();
        if !unknown.is_empty() {
            return Err(ConfigError::Unknown(unknown));
        }
        let missing: Vec<String> = REQUIRED
            .iter()
            .filter(|k| !table.contains_key(**k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(ConfigError::Missing(missing));
        }

        let mut c = match table.get("preset") {
            None => Config::full(),
            Some(v) => match str_of("preset", v)?.as_str() {
                "full" => Config::full(),
                "desk" => Config::desk(),
                other => {
                    return Err(ConfigError::Invalid {
                        key: "preset",
                        message: format!("expected `full` or `desk`, got `{other}`"),
                    })
                }
            },
        };
        for (key, v) in &table {
            let k = key.as_str();
            match k {
                "preset" => {}
                "dataset" => c.dataset = str_of(k, v)?.into(),
                "output" => c.output = str_of(k, v)?.into(),
                "seed" => c.seed = uint_of(k, v)?,
                "hidden_dim" => c.hidden_dim = uint_of(k, v)? as usize,
                "depth" => c.depth = uint_of(k, v)? as usize,
                "activation" => c.activation = str_of(k, v)?,
                "omega0" => c.omega0 = float_of(k, v)?,
                "fourier_sigma" => c.fourier_sigma = float_of(k, v)?,
                "fourier_features" => c.fourier_features = uint_of(k, v)? as usize,
                "head" => c.head = str_of(k, v)?,
                "k" => c.k = uint_of(k, v)? as usize,
                "l" => c.l = uint_of(k, v)? as usize,
                "gamma" => c.gamma = float_of(k, v)?,
                "lambda" => c.lambda = float_of(k, v)?,
                "beta" => c.beta = float_of(k, v)?,
                "alpha_init" => c.alpha_init = float_of(k, v)?,
                "outer_steps" => c.outer_steps = uint_of(k, v)? as usize,
                "batch_size" => c.batch_size = uint_of(k, v)? as usize,
                "scorer" => {
                    let name = str_of(k, v)?;
                    c.scorer = Scorer::parse(&name).ok_or_else(|| ConfigError::Invalid {
                        key: "scorer",
                        message: format!("unknown scorer `{name}`"),
                    })?;
                }
                "first_order" => {
                    c.first_order = v.as_bool().ok_or_else(|| type_err(k, "a boolean"))?;
                }
                "checkpoint_every" => c.checkpoint_every = uint_of(k, v)? as usize,
                "test_fraction" => c.test_fraction = float_of(k, v)?,
                "block_rows" => c.block_rows = uint_of(k, v)? as usize,
                _ => unreachable!("key list checked above"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key, message: &str| {
            Err(ConfigError::Invalid {
                key,
                message: message.to_string(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return invalid("gamma", &format!("must lie in (0, 1], got {}", self.gamma));
        }
        if self.k < 1 {
            return invalid("k", "must be at least 1");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid("lambda", "must be a non-negative number");
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return invalid("beta", "must be a non-negative number");
        }
        if !(self.alpha_init > 0.0) || !self.alpha_init.is_finite() {
            return invalid("alpha_init", "must be positive");
        }
        if self.batch_size < 1 {
            return invalid("batch_size", "must be at least 1");
        }
        if self.hidden_dim < 1 {
            return invalid("hidden_dim", "must be at least 1");
        }
        if self.depth < 1 {
            return invalid("depth", "must be at least 1");
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return invalid("test_fraction", "must lie in [0, 1)");
        }
        if self.block_rows < 1 {
            return invalid("block_rows", "must be at least 1");
        }
        if !["sine", "relu_fourier"].contains(&self.activation.as_str()) {
            return invalid("activation", "expected `sine` or `relu_fourier`");
        }
        if !["linear", "sigmoid"].contains(&self.head.as_str()) {
            return invalid("head", "expected `linear` or `sigmoid`");
        }
        if self.activation == "relu_fourier" && (self.fourier_features < 1 || !(self.fourier_sigma > 0.0)) {
            return invalid("fourier_features", "Fourier features need a positive count and sigma");
        }
        Ok(())
    }

    /// Architecture for signals with `input_dim` coordinates and
    /// `output_dim` channels.
    pub fn model_spec(&self, input_dim: usize, output_dim: usize) -> ModelSpec {
        let activation = match self.activation.as_str() {
            "relu_fourier" => Activation::ReluFourier {
                sigma: self.fourier_sigma,
                features: self.fourier_features,
                seed: crate::seeds::derive(self.seed, crate::seeds::FOURIER, 0),
            },
            _ => Activation::Sine { omega0: self.omega0 },
        };
        ModelSpec {
            input_dim,
            output_dim,
            hidden_dim: self.hidden_dim,
            depth: self.depth,
            activation,
            head: if self.head == "sigmoid" { Head::Sigmoid } else { Head::Linear },
        }
    }

    pub fn train_options(&self, precision: Precision) -> TrainOptions {
        TrainOptions {
            scorer: self.scorer,
            first_order: self.first_order,
            block_rows: self.block_rows,
            precision,
        }
    }
}

const REQUIRED: &[&str] = &["dataset", "output"];

const KEYS: &[&str] = &[
    "preset",
    "dataset",
    "output",
    "seed",
    "hidden_dim",
    "depth",
    "activation",
    "omega0",
    "fourier_sigma",
    "fourier_features",
    "head",
    "k",
    "l",
    "gamma",
    "lambda",
    "beta",
    "alpha_init",
    "outer_steps",
    "batch_size",
    "scorer",
    "first_order",
    "checkpoint_every",
    "test_fraction",
    "block_rows",
];

fn type_err(key: &str, expected: &'static str) -> ConfigError {
    ConfigError::Type {
        key: key.to_string(),
        expected,
    }
}

fn str_of(key: &str, v: &toml::Value) -> Result<String> {
    v.as_str().map(str::to_string).ok_or_else(|| type_err(key, "a string"))
}

fn uint_of(key: &str, v: &toml::Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| type_err(key, "a non-negative integer"))
}

fn float_of(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(key, "a number")),
    }
}

/// Precision named by `FIELDMETA_PRECISION` (`f32` or `f64`, default `f64`).
pub fn precision_from_env() -> Result<Precision> {
    match std::env::var(PRECISION_ENV) {
        Err(_) => Ok(Precision::F64),
        Ok(v) => parse_precision(&v),
    }
}

pub fn parse_precision(v: &str) -> Result<Precision> {
    match v.trim() {
        "" | "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => Err(ConfigError::Invalid {
            key: "FIELDMETA_PRECISION",
            message: format!("expected `f32` or `f64`, got `{other}`"),
        }),
    }
}
