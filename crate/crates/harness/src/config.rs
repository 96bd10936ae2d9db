//! Run configuration and the `key = value` config file.
//!
//! A config file is UTF-8 text. Keys before the first `[section]` apply to
//! every subcommand; keys under `[train]`, `[split-mnist]` and so on apply to
//! that subcommand only and win over the top-level ones. `#` starts a comment.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use backman_core::backman::AlphaPolicy;
use backman_core::network::{Activation, NetSpec};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{key}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

/// Flat key/value settings, already merged for one subcommand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses `text` and merges the top level with `section`.
    pub fn parse(text: &str, section: &str) -> Result<Settings, ConfigError> {
        let mut top = BTreeMap::new();
        let mut own = BTreeMap::new();
        let mut current: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax { line: n + 1, msg: "unclosed section".into() })?;
                current = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim().replace('-', "_");
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: n + 1, msg: "empty key".into() });
            }
            let v = v.trim().to_string();
            match current.as_deref() {
                None => {
                    top.insert(k, v);
                }
                Some(s) if s == section => {
                    own.insert(k, v);
                }
                Some(_) => {}
            }
        }
        top.extend(own);
        Ok(Settings { values: top })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.replace('-', "_"), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::Value { key: key.into(), value: v.into() }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty string is an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        if v.trim().is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| ConfigError::Value { key: key.into(), value: v.into() }))
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    pub fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError> {
        Ok(self.list(key)?.unwrap_or(default))
    }

    pub fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key) {
            None => Ok(false),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(ConfigError::Value { key: key.into(), value: v.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Ebp,
    Backman,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Ebp => "ebp",
            Engine::Backman => "backman",
        }
    }
}

impl FromStr for Engine {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "ebp" => Ok(Engine::Ebp),
            "backman" => Ok(Engine::Backman),
            _ => Err(ConfigError::Value { key: "engine".into(), value: s.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Fixed,
    Dynamic,
}

impl FromStr for PolicyKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "fixed" => Ok(PolicyKind::Fixed),
            "dynamic" => Ok(PolicyKind::Dynamic),
            _ => Err(ConfigError::Value { key: "alpha_policy".into(), value: s.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheduler {
    None,
    /// Multiply the rate by 0.1 once half the epochs are done.
    StepHalf,
}

impl FromStr for Scheduler {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "none" => Ok(Scheduler::None),
            "step" | "step-half" | "step_half" => Ok(Scheduler::StepHalf),
            _ => Err(ConfigError::Value { key: "scheduler".into(), value: s.into() }),
        }
    }
}

fn parse_activation(s: &str) -> Result<Activation, ConfigError> {
    match s {
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        _ => match s.strip_prefix("leaky_relu:").map(str::parse::<f64>) {
            Some(Ok(slope)) => Ok(Activation::LeakyRelu { slope }),
            _ => Err(ConfigError::Value { key: "activation".into(), value: s.into() }),
        },
    }
}

/// Everything one training run needs besides its data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
    pub engine: Engine,
    /// Learning rate for EBP; budget `alpha` (fixed) or `eta` (dynamic) for BackMAN.
    pub rate: f64,
    pub policy: PolicyKind,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub scheduler: Scheduler,
    pub diagnostics: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            inputs: 784,
            hidden: vec![256, 256],
            classes: 10,
            activation: Activation::Relu,
            engine: Engine::Backman,
            rate: 0.05,
            policy: PolicyKind::Fixed,
            batch: 64,
            epochs: 10,
            seed: 0,
            scheduler: Scheduler::StepHalf,
            diagnostics: false,
            out: None,
        }
    }
}

impl RunConfig {
    /// Reads the run keys from `s`, starting from the defaults.
    ///
    /// `alpha` and `lr` are synonyms for `rate`.
    pub fn from_settings(s: &Settings) -> Result<RunConfig, ConfigError> {
        let d = RunConfig::default();
        let rate = match (s.get::<f64>("rate")?, s.get::<f64>("alpha")?, s.get::<f64>("lr")?) {
            (Some(r), _, _) | (None, Some(r), _) | (None, None, Some(r)) => r,
            (None, None, None) => d.rate,
        };
        let cfg = RunConfig {
            inputs: s.get_or("inputs", d.inputs)?,
            hidden: s.list_or("hidden", d.hidden)?,
            classes: s.get_or("classes", d.classes)?,
            activation: match s.raw("activation") {
                Some(a) => parse_activation(a)?,
                None => d.activation,
            },
            engine: s.get_or("engine", d.engine)?,
            rate,
            policy: s.get_or("alpha_policy", d.policy)?,
            batch: s.get_or("batch", d.batch)?,
            epochs: s.get_or("epochs", d.epochs)?,
            seed: s.get_or("seed", d.seed)?,
            scheduler: s.get_or("scheduler", d.scheduler)?,
            diagnostics: s.flag("diagnostics")?,
            out: s.raw("out").map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return Err(ConfigError::Invalid(format!("rate must be finite and >= 0, got {}", self.rate)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(ConfigError::Invalid("batch and epochs must be positive".into()));
        }
        if self.inputs == 0 || self.classes < 2 || self.hidden.contains(&0) {
            return Err(ConfigError::Invalid("layer widths must be positive, with >= 2 classes".into()));
        }
        if self.engine == Engine::Ebp && self.policy == PolicyKind::Dynamic {
            return Err(ConfigError::Invalid("the dynamic alpha policy needs the backman engine".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> NetSpec {
        let mut widths = vec![self.inputs];
        widths.extend(&self.hidden);
        widths.push(self.classes);
        NetSpec::mlp(&widths, self.activation)
    }

    /// Rate in effect during `epoch` (1-based).
    pub fn rate_at(&self, epoch: usize) -> f64 {
        match self.scheduler {
            Scheduler::StepHalf if epoch > self.epochs / 2 => self.rate * 0.1,
            _ => self.rate,
        }
    }

    pub fn alpha_policy(&self, rate: f64) -> AlphaPolicy {
        match self.policy {
            PolicyKind::Fixed => AlphaPolicy::Fixed(rate),
            PolicyKind::Dynamic => AlphaPolicy::Dynamic { eta: rate },
        }
    }
}
