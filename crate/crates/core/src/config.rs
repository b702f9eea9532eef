//! Run configuration: defaults, an optional TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::aggregation::Decision;
use crate::client::Sampling;
use crate::evolution::{EvolutionConfig, StageSampling};
use crate::fitness::FitnessWeights;
use crate::grounding::DEFAULT_MAX_OBJECTS;
use crate::rational::parse_rational;
use crate::routing::DispatchMode;

pub const DEFAULT_MODEL: &str = "default";
pub const DEFAULT_MAX_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub max_concurrency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mu: usize,
    pub lambda: usize,
    pub tau: usize,
    pub generations: usize,
    pub weights: FitnessWeights,
    pub dispatch_mode: DispatchMode,
    pub decision: Decision,
    pub route_cache: bool,
    pub seed: u64,
    pub max_objects: usize,
    pub endpoints: Vec<EndpointConfig>,
    pub serial: bool,
    pub sampling: StageSampling,
    /// Not part of the run's identity, so never serialized.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let evo = EvolutionConfig::default();
        RunConfig {
            mu: evo.mu,
            lambda: evo.lambda,
            tau: evo.tau,
            generations: evo.generations,
            weights: evo.weights,
            dispatch_mode: evo.dispatch_mode,
            decision: Decision::Elite,
            route_cache: evo.route_cache,
            seed: evo.seed,
            max_objects: DEFAULT_MAX_OBJECTS,
            endpoints: Vec::new(),
            serial: false,
            sampling: evo.sampling,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read config file {path}: {message}")]
    Read { path: String, message: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { field: field.into(), message: message.into() }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::Read { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingOverrides {
    pub init: Option<StageOverride>,
    pub evolve: Option<StageOverride>,
    pub route: Option<StageOverride>,
    pub aggregate: Option<StageOverride>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEndpoint {
    pub url: String,
    pub model: Option<String>,
    pub max_concurrency: Option<usize>,
}

/// Every setting is optional; absent keys keep the default.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mu: Option<usize>,
    pub lambda: Option<usize>,
    pub tau: Option<usize>,
    #[serde(alias = "T")]
    pub generations: Option<usize>,
    /// `"c,d,e,u"` or a table with `consensus`, `diversity`, `evidence`, `uncertainty`.
    pub weights: Option<toml::Value>,
    pub dispatch_mode: Option<DispatchMode>,
    pub decision: Option<Decision>,
    pub route_cache: Option<bool>,
    pub seed: Option<u64>,
    pub max_objects: Option<usize>,
    pub endpoints: Option<Vec<FileEndpoint>>,
    pub serial: Option<bool>,
    pub sampling: Option<SamplingOverrides>,
    pub out: Option<PathBuf>,
}

/// Values given on the command line; `None` means not given.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlagOverrides {
    pub mu: Option<usize>,
    pub lambda: Option<usize>,
    pub tau: Option<usize>,
    pub generations: Option<usize>,
    pub weights: Option<String>,
    pub dispatch_mode: Option<DispatchMode>,
    pub decision: Option<Decision>,
    pub no_route_cache: bool,
    pub seed: Option<u64>,
    pub max_objects: Option<usize>,
    pub endpoints: Vec<String>,
    pub model: Option<String>,
    pub max_concurrency: Option<usize>,
    pub serial: bool,
    pub out: Option<PathBuf>,
}

/// Parses `"c,d,e,u"`; each entry is an integer, fraction or decimal.
pub fn parse_weights(raw: &str) -> Result<FitnessWeights, ConfigError> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(ConfigError::invalid("weights", format!("expected four comma-separated values, got `{raw}`")));
    }
    let mut w = [Rational64::default(); 4];
    for (slot, part) in w.iter_mut().zip(&parts) {
        *slot = parse_rational(part).map_err(|e| ConfigError::invalid("weights", e.to_string()))?;
    }
    let weights = FitnessWeights { consensus: w[0], diversity: w[1], evidence: w[2], uncertainty: w[3] };
    weights.validate().map_err(|e| ConfigError::invalid("weights", e.to_string()))?;
    Ok(weights)
}

fn weights_from_toml(value: &toml::Value) -> Result<FitnessWeights, ConfigError> {
    match value {
        toml::Value::String(s) => parse_weights(s),
        toml::Value::Table(t) => {
            let mut w = FitnessWeights::default();
            for (key, v) in t {
                let raw = match v {
                    toml::Value::String(s) => s.clone(),
                    toml::Value::Integer(i) => i.to_string(),
                    toml::Value::Float(f) => f.to_string(),
                    _ => return Err(ConfigError::invalid(format!("weights.{key}"), "expected a number")),
                };
                let r = parse_rational(&raw).map_err(|e| ConfigError::invalid(format!("weights.{key}"), e.to_string()))?;
                match key.as_str() {
                    "consensus" => w.consensus = r,
                    "diversity" => w.diversity = r,
                    "evidence" => w.evidence = r,
                    "uncertainty" => w.uncertainty = r,
                    _ => return Err(ConfigError::invalid(format!("weights.{key}"), "unknown weight")),
                }
            }
            w.validate().map_err(|e| ConfigError::invalid("weights", e.to_string()))?;
            Ok(w)
        }
        _ => Err(ConfigError::invalid("weights", "expected a string or a table")),
    }
}

fn apply_stage(target: &mut Sampling, over: &Option<StageOverride>) {
    if let Some(o) = over {
        if let Some(t) = o.temperature {
            target.temperature = t;
        }
        if let Some(m) = o.max_tokens {
            target.max_tokens = m;
        }
    }
}

pub fn load_file_config(path: &Path) -> Result<FileConfig, ConfigError> {
    let read_err = |message: String| ConfigError::Read { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
    toml::from_str(&text).map_err(|e| read_err(e.to_string()))
}

impl RunConfig {
    /// Flags override the file, which overrides defaults. The result is validated.
    pub fn resolve(file: Option<&FileConfig>, flags: &FlagOverrides) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            macro_rules! take {
                ($($field:ident),*) => { $( if let Some(v) = f.$field.clone() { cfg.$field = v; } )* };
            }
            take!(mu, lambda, tau, generations, dispatch_mode, decision, route_cache, seed, max_objects, serial);
            if let Some(w) = &f.weights {
                cfg.weights = weights_from_toml(w)?;
            }
            if let Some(eps) = &f.endpoints {
                cfg.endpoints = eps
                    .iter()
                    .map(|e| EndpointConfig {
                        url: e.url.clone(),
                        model: e.model.clone().unwrap_or_else(|| DEFAULT_MODEL.into()),
                        max_concurrency: e.max_concurrency.unwrap_or(DEFAULT_MAX_CONCURRENCY),
                    })
                    .collect();
            }
            if let Some(s) = &f.sampling {
                apply_stage(&mut cfg.sampling.init, &s.init);
                apply_stage(&mut cfg.sampling.evolve, &s.evolve);
                apply_stage(&mut cfg.sampling.route, &s.route);
                apply_stage(&mut cfg.sampling.aggregate, &s.aggregate);
            }
            cfg.out = f.out.clone();
        }

        macro_rules! flag {
            ($($field:ident),*) => { $( if let Some(v) = flags.$field.clone() { cfg.$field = v; } )* };
        }
        flag!(mu, lambda, tau, generations, dispatch_mode, decision, seed, max_objects);
        if let Some(w) = &flags.weights {
            cfg.weights = parse_weights(w)?;
        }
        if flags.no_route_cache {
            cfg.route_cache = false;
        }
        if flags.serial {
            cfg.serial = true;
        }
        if flags.out.is_some() {
            cfg.out = flags.out.clone();
        }
        if !flags.endpoints.is_empty() {
            cfg.endpoints = flags
                .endpoints
                .iter()
                .map(|url| EndpointConfig {
                    url: url.clone(),
                    model: DEFAULT_MODEL.into(),
                    max_concurrency: DEFAULT_MAX_CONCURRENCY,
                })
                .collect();
        }
        for e in &mut cfg.endpoints {
            if let Some(m) = &flags.model {
                e.model = m.clone();
            }
            if let Some(c) = flags.max_concurrency {
                e.max_concurrency = c;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("mu", self.mu), ("lambda", self.lambda), ("tau", self.tau), ("max_objects", self.max_objects)] {
            if v == 0 {
                return Err(ConfigError::invalid(name, "must be at least 1"));
            }
        }
        self.weights.validate().map_err(|e| ConfigError::invalid("weights", e.to_string()))?;
        for (i, e) in self.endpoints.iter().enumerate() {
            if e.max_concurrency == 0 {
                return Err(ConfigError::invalid(format!("endpoints[{i}].max_concurrency"), "must be at least 1"));
            }
            if e.url.trim().is_empty() {
                return Err(ConfigError::invalid(format!("endpoints[{i}].url"), "must not be empty"));
            }
        }
        for (stage, s) in [
            ("init", self.sampling.init),
            ("evolve", self.sampling.evolve),
            ("route", self.sampling.route),
            ("aggregate", self.sampling.aggregate),
        ] {
            if !(0.0..=2.0).contains(&s.temperature) {
                return Err(ConfigError::invalid(format!("sampling.{stage}.temperature"), "must lie in [0, 2]"));
            }
            if s.max_tokens == 0 {
                return Err(ConfigError::invalid(format!("sampling.{stage}.max_tokens"), "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn evolution(&self) -> EvolutionConfig {
        EvolutionConfig {
            mu: self.mu,
            lambda: self.lambda,
            tau: self.tau,
            generations: self.generations,
            weights: self.weights,
            dispatch_mode: self.dispatch_mode,
            route_cache: self.route_cache,
            seed: self.seed,
            sampling: self.sampling,
        }
    }
}
