//! Key-value run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment; blank lines are
//! ignored. Keys not listed in [`KEYS`] are rejected. Values given on the
//! command line replace file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use scl_core::data::Regime;
use scl_core::losses::LossWeights;
use scl_core::sampling::LabelMode;
use scl_core::trainer::{Phase, PhaseConfig, Toggles};
use thiserror::Error;

/// Environment variable naming the root that relative output paths are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "SCL_OUTPUT_ROOT";

/// Every accepted key with its default, as documented in the README.
pub const KEYS: &[(&str, &str)] = &[
    ("regime", "single"),
    ("n", "40"),
    ("k", "8"),
    ("seed", "0"),
    ("dataset", ""),
    ("out", "runs"),
    ("encoders", ""),
    ("checkpoint", ""),
    ("tau", "0.5"),
    ("origin_tau", "0.1"),
    ("lambda1", "0.5"),
    ("lambda2", "0.2"),
    ("lambda2_list", "0,0.1,0.2,0.5"),
    ("epochs", ""),
    ("pretrain_epochs", "30"),
    ("gan_epochs", "60"),
    ("batch", "16"),
    ("label_mode", ""),
    ("encoder_lr", "0.001"),
    ("gan_lr", "0.0002"),
    ("use_pre", "true"),
    ("use_sup_img", "true"),
    ("use_sup_i2t", "true"),
    ("use_sup_txt", "true"),
    ("aux_ce", "false"),
    ("share_noise", "false"),
    ("cross_modal_include_self", "false"),
    ("eval_samples", "2000"),
    ("emit", "rows"),
    ("parallel", "false"),
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {message}")]
    Syntax {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("{source_name}:{line}: unknown key `{key}`")]
    UnknownKey {
        source_name: String,
        line: usize,
        key: String,
    },
    #[error("{source_name}:{line}: invalid value `{value}` for key `{key}`: {message}")]
    Value {
        source_name: String,
        line: usize,
        key: String,
        value: String,
        message: String,
    },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    value: String,
    source_name: String,
    line: usize,
}

/// Raw key-value pairs with the location each came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, Entry>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl ConfigMap {
    pub fn parse(text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let mut map = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    source_name: source_name.into(),
                    line,
                    message: format!("expected `key = value`, found `{content}`"),
                });
            };
            map.insert(key.trim(), value.trim(), source_name, line)?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Adds or replaces a value. Overrides from the command line use the
    /// source name `--set` and their position as the line.
    pub fn insert(&mut self, key: &str, value: &str, source_name: &str, line: usize) -> Result<(), ConfigError> {
        if !known(key) {
            return Err(ConfigError::UnknownKey {
                source_name: source_name.into(),
                line,
                key: key.into(),
            });
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                source_name: source_name.into(),
                line,
            },
        );
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for (i, o) in overrides.iter().enumerate() {
            let Some((k, v)) = o.split_once('=') else {
                return Err(ConfigError::Syntax {
                    source_name: "--set".into(),
                    line: i + 1,
                    message: format!("expected `key=value`, found `{o}`"),
                });
            };
            self.insert(k.trim(), v.trim(), "--set", i + 1)?;
        }
        Ok(())
    }

    fn raw(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    fn get<T: std::str::FromStr>(&self, key: &'static str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let (value, source_name, line) = match self.raw(key) {
            Some(e) => (e.value.as_str(), e.source_name.as_str(), e.line),
            None => {
                let default = KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).unwrap_or("");
                (default, "default", 0)
            }
        };
        if value.is_empty() {
            return Ok(None);
        }
        value.parse::<T>().map(Some).map_err(|e| ConfigError::Value {
            source_name: source_name.into(),
            line,
            key: key.into(),
            value: value.into(),
            message: e.to_string(),
        })
    }

    fn require<T: std::str::FromStr>(&self, key: &'static str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or(ConfigError::Missing(key))
    }
}

/// Stdout format of a command's results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emit {
    /// Aligned human-readable table.
    Rows,
    /// One JSON record per line.
    Records,
}

impl std::str::FromStr for Emit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rows" => Ok(Emit::Rows),
            "records" => Ok(Emit::Records),
            other => Err(format!("expected rows or records, got {other}")),
        }
    }
}

/// Fully typed configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub regime: Regime,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub encoders: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub weights: LossWeights,
    pub lambda2_list: Vec<f64>,
    /// Overrides the epoch count of the command's own phase.
    pub epochs: Option<usize>,
    pub pretrain_epochs: usize,
    pub gan_epochs: usize,
    pub batch: usize,
    pub label_mode: Option<LabelMode>,
    pub encoder_lr: f64,
    pub gan_lr: f64,
    pub toggles: Toggles,
    pub eval_samples: usize,
    pub emit: Emit,
    pub parallel: bool,
}

fn parse_list(map: &ConfigMap) -> Result<Vec<f64>, ConfigError> {
    let raw: String = map.require("lambda2_list")?;
    raw.split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| {
                let entry = map.raw("lambda2_list");
                ConfigError::Value {
                    source_name: entry.map_or("default".into(), |e| e.source_name.clone()),
                    line: entry.map_or(0, |e| e.line),
                    key: "lambda2_list".into(),
                    value: raw.clone(),
                    message: e.to_string(),
                }
            })
        })
        .collect()
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        let weights = LossWeights {
            tau: map.require("tau")?,
            origin_tau: map.require("origin_tau")?,
            lambda1: map.require("lambda1")?,
            lambda2: map.require("lambda2")?,
        };
        if let Err(e) = weights.validate() {
            return Err(ConfigError::Value {
                source_name: "config".into(),
                line: 0,
                key: "tau/lambda".into(),
                value: String::new(),
                message: e.to_string(),
            });
        }
        let toggles = Toggles {
            use_pretrained_encoders: map.require("use_pre")?,
            use_sup_img: map.require("use_sup_img")?,
            use_sup_i2t: map.require("use_sup_i2t")?,
            use_sup_txt: map.require("use_sup_txt")?,
            aux_ce_baseline: map.require("aux_ce")?,
            share_noise: map.require("share_noise")?,
            cross_modal_include_self: map.require("cross_modal_include_self")?,
        };
        Ok(Self {
            regime: map.require("regime")?,
            n: map.require("n")?,
            k: map.require("k")?,
            seed: map.require("seed")?,
            dataset: map.get("dataset")?,
            out: map.require("out")?,
            encoders: map.get("encoders")?,
            checkpoint: map.get("checkpoint")?,
            weights,
            lambda2_list: parse_list(map)?,
            epochs: map.get("epochs")?,
            pretrain_epochs: map.require("pretrain_epochs")?,
            gan_epochs: map.require("gan_epochs")?,
            batch: map.require("batch")?,
            label_mode: map.get("label_mode")?,
            encoder_lr: map.require("encoder_lr")?,
            gan_lr: map.require("gan_lr")?,
            toggles,
            eval_samples: map.require("eval_samples")?,
            emit: map.require("emit")?,
            parallel: map.require("parallel")?,
        })
    }

    /// Phase settings; `label_mode` falls back to the dataset regime.
    pub fn phase_config(&self, phase: Phase, regime: Regime) -> PhaseConfig {
        let mut c = match phase {
            Phase::Pretrain => PhaseConfig::pretrain(self.seed),
            Phase::Gan => PhaseConfig::gan(self.seed),
        };
        c.epochs = match phase {
            Phase::Pretrain => self.pretrain_epochs,
            Phase::Gan => self.gan_epochs,
        };
        c.batch = self.batch;
        c.weights = self.weights;
        c.label_mode = self.label_mode.unwrap_or(match regime {
            Regime::Single => LabelMode::Single,
            Regime::Multi => LabelMode::Multi,
        });
        c.toggles = self.toggles;
        c.encoder_lr = self.encoder_lr;
        c.gan_lr = self.gan_lr;
        c
    }

    /// `path` resolved against the output root when it is relative and the
    /// environment variable is set.
    pub fn resolve_output(path: &Path) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        Self::resolve_output(&self.out)
    }
}
