//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, unknown keys are errors. Every
//! key has a default, and [`Config::to_text`] writes the fully resolved
//! configuration back out so that a run can be replayed from its snapshot.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorChoice {
    Marginalized,
    Lr,
}

impl FromStr for EstimatorChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginalized" => Ok(EstimatorChoice::Marginalized),
            "lr" => Ok(EstimatorChoice::Lr),
            other => Err(Error::UnknownEstimator(other.to_string())),
        }
    }
}

impl fmt::Display for EstimatorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorChoice::Marginalized => "marginalized",
            EstimatorChoice::Lr => "lr",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Mnist,
}

impl FromStr for DataSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "mnist" => Ok(DataSource::Mnist),
            other => Err(Error::Config(format!("unknown data source `{other}`"))),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Mnist => "mnist",
        })
    }
}

macro_rules! config_keys {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $( $name: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($name), )*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = value.parse::<$ty>().map_err(|e| {
                            Error::Config(format!("bad value `{value}` for `{key}`: {e}"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), self.$name.to_string()), )*]
            }
        }
    };
}

config_keys! {
    /// Root seed; every random stream is derived from it.
    seed: u64 = 1,
    /// Latent layer sizes, deepest first, e.g. `200-200`.
    architecture: String = "200-200".to_string(),
    estimator: EstimatorChoice = EstimatorChoice::Marginalized,
    learning_rate: f64 = 0.001,
    batch_size: usize = 100,
    /// L2 coefficient applied to weight matrices only.
    weight_decay: f64 = 0.001,
    rmsprop_decay: f64 = 0.9,
    rmsprop_epsilon: f64 = 1e-8,
    epochs: usize = 1,
    /// Stop after this many updates; 0 means run all epochs.
    max_updates: usize = 0,
    validation_interval: usize = 1000,
    init_scale: f64 = 0.01,
    baseline_hidden: usize = 100,
    baseline_decay: f64 = 0.9,
    baseline_init_scale: f64 = 0.01,
    include_direct_term: bool = false,
    /// Monte-Carlo samples per image for validation bounds.
    valid_samples: usize = 1,
    /// Monte-Carlo samples per image for the final test bound.
    test_samples: usize = 100,
    data: DataSource = DataSource::Synthetic,
    mnist_dir: String = String::new(),
    synthetic_dim: usize = 64,
    synthetic_train: usize = 2000,
    synthetic_valid: usize = 500,
    synthetic_test: usize = 500,
    /// Checkpoint read by `eval` and `profile-variance`.
    checkpoint: String = String::new(),
    profile_images: usize = 50,
    profile_samples: usize = 100,
    verify_models: usize = 20,
    verify_trials: usize = 100_000,
    verify_data_dim: usize = 4,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("decay rates must lie in [0, 1)");
        }
        if self.validation_interval == 0 {
            return bad("validation_interval must be >= 1");
        }
        if self.valid_samples == 0 || self.test_samples == 0 {
            return bad("bound evaluation needs at least one sample per image");
        }
        if self.profile_samples < 2 {
            return bad("profile_samples must be >= 2");
        }
        Ok(())
    }

    /// Resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
