//! Run configuration: dataset presets, file and flag overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::adapt::{BandConfig, StreamMode};
use crate::detector::DetectorConfig;
use crate::mining::MiningConfig;
use crate::retrieval::{Ablation, JointSimWeights};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("config file {path} must hold a JSON object")]
    NotAnObject { path: PathBuf },
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config file {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_owned(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "N_g")]
    pub n_groups: usize,
    pub tau: f64,
    pub eta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub u1: f64,
    pub u2: f64,
    pub gamma: f64,
    pub ensemble_seed: u64,
    /// Seed of the shuffle that interleaves ID and OOD test samples into one stream.
    pub stream_seed: u64,
    pub mode: StreamMode,
    pub disable_sim1: bool,
    pub disable_sim2: bool,
    pub disable_sim3: bool,
    pub disable_test_adapt: bool,
    pub max_test_prompts: Option<usize>,
    pub batch: usize,
    pub id_prompts: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub crops: Option<PathBuf>,
    pub id_test: Option<PathBuf>,
    pub ood_test: Option<PathBuf>,
}

pub const DEFAULT_PRESET: &str = "imagenet1k-inaturalist";

/// `(name, λ1, λ2, λ3, u1, u2)` for the named benchmark pairs.
const TABLE: [(&str, f64, f64, f64, f64, f64); 7] = [
    ("imagenet1k-inaturalist", 0.2, -0.2, -1.0, 0.5, 0.6),
    ("imagenet1k-sun", 0.2, -0.2, -1.0, 0.2, 0.3),
    ("imagenet1k-places", 0.2, -0.2, -1.0, 0.4, 0.5),
    ("imagenet1k-textures", 0.2, -0.2, -1.0, 0.4, 0.6),
    ("imagenet10-imagenet20", 0.05, -0.005, -1.0, 0.0, 0.5),
    ("imagenet20-imagenet10", 0.1, -0.02, -1.0, 0.0, 0.2),
    ("imagenet100-imagenet10", 0.1, -0.01, -1.0, 0.0, 0.2),
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(DEFAULT_PRESET).expect("default preset exists")
    }
}

impl RunConfig {
    pub fn preset_names() -> Vec<&'static str> {
        TABLE.iter().map(|r| r.0).chain(["synthetic"]).collect()
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let base = |lambda1, lambda2, lambda3, u1, u2| RunConfig {
            preset: name.to_owned(),
            m: 256,
            l: 32,
            p: 10_000,
            q: 4,
            n_groups: 100,
            tau: 0.01,
            eta: 5.0,
            lambda1,
            lambda2,
            lambda3,
            u1,
            u2,
            gamma: 0.5,
            ensemble_seed: 0,
            stream_seed: 0,
            mode: StreamMode::Online,
            disable_sim1: false,
            disable_sim2: false,
            disable_sim3: false,
            disable_test_adapt: false,
            max_test_prompts: None,
            batch: 256,
            id_prompts: None,
            vocab: None,
            crops: None,
            id_test: None,
            ood_test: None,
        };
        if name == "synthetic" {
            return Ok(RunConfig { m: 16, l: 4, p: 100, q: 2, max_test_prompts: Some(100), ..base(1.0, -1.0, -0.5, 0.0, 0.999) });
        }
        TABLE
            .iter()
            .find(|r| r.0 == name)
            .map(|&(_, l1, l2, l3, u1, u2)| base(l1, l2, l3, u1, u2))
            .ok_or_else(|| ConfigError::UnknownPreset(name.to_owned()))
    }

    /// Builds the effective config: preset, then `file`, then `flags`.
    /// The preset is taken from `flags`, else `file`, else the default.
    pub fn resolve(file: Option<&Map<String, Value>>, flags: &Map<String, Value>) -> Result<Self, ConfigError> {
        let preset_of = |m: &Map<String, Value>| -> Result<Option<String>, ConfigError> {
            match m.get("preset") {
                None => Ok(None),
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(_) => Err(invalid("preset", "must be a string")),
            }
        };
        let name = match preset_of(flags)? {
            Some(n) => n,
            None => file.map(preset_of).transpose()?.flatten().unwrap_or_else(|| DEFAULT_PRESET.to_owned()),
        };
        let mut cfg = Self::preset(&name)?;
        if let Some(file) = file {
            cfg.apply(file)?;
        }
        cfg.apply(flags)?;
        cfg.preset = name;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides fields key by key, so a bad value names its key.
    pub fn apply(&mut self, overrides: &Map<String, Value>) -> Result<(), ConfigError> {
        for (key, value) in overrides {
            if key == "preset" {
                continue;
            }
            let mut current = match serde_json::to_value(&*self).expect("config serializes") {
                Value::Object(m) => m,
                _ => unreachable!("config is a struct"),
            };
            if !current.contains_key(key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
            current.insert(key.clone(), value.clone());
            *self = serde_json::from_value(Value::Object(current)).map_err(|e| invalid(key, e.to_string()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.m == 0 {
            return Err(invalid("M", "must be at least 1"));
        }
        if self.l == 0 {
            return Err(invalid("L", "must be at least 1"));
        }
        if 2 * self.l > self.m {
            return Err(invalid("L", format!("2L = {} exceeds M = {}", 2 * self.l, self.m)));
        }
        if self.n_groups == 0 {
            return Err(invalid("N_g", "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.eta > 0.0 && self.eta <= 100.0) {
            return Err(invalid("eta", format!("must be in (0, 100], got {}", self.eta)));
        }
        if !(self.lambda1 > 0.0) {
            return Err(invalid("lambda1", format!("must be > 0, got {}", self.lambda1)));
        }
        if !(self.lambda2 < 0.0) {
            return Err(invalid("lambda2", format!("must be < 0, got {}", self.lambda2)));
        }
        if !(self.lambda3 < 0.0) {
            return Err(invalid("lambda3", format!("must be < 0, got {}", self.lambda3)));
        }
        for (key, v) in [("u1", self.u1), ("u2", self.u2), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(key, format!("must be in [0, 1], got {v}")));
            }
        }
        if self.u1 > self.u2 {
            return Err(invalid("u2", format!("must be >= u1 = {}, got {}", self.u1, self.u2)));
        }
        if self.batch == 0 {
            return Err(invalid("batch", "must be at least 1"));
        }
        Ok(())
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig { crops_per_image: self.m, per_side: self.l }
    }

    pub fn weights(&self) -> JointSimWeights {
        JointSimWeights::new(self.lambda1, self.lambda2, self.lambda3, self.eta).expect("validated")
    }

    pub fn ablation(&self) -> Ablation {
        Ablation { disable_sim1: self.disable_sim1, disable_sim2: self.disable_sim2, disable_sim3: self.disable_sim3 }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig { tau: self.tau, gamma: self.gamma, n_groups: self.n_groups, ensemble_seed: self.ensemble_seed }
    }

    pub fn band(&self) -> BandConfig {
        BandConfig { u1: self.u1, u2: self.u2, q: self.q, max_test_prompts: self.max_test_prompts }
    }

    /// Points every store path at the conventional file names in `dir`.
    pub fn with_store_dir(mut self, dir: &Path) -> Self {
        self.id_prompts = Some(dir.join("id_prompts.rap"));
        self.vocab = Some(dir.join("vocab.rap"));
        self.crops = Some(dir.join("crops.rap"));
        self.id_test = Some(dir.join("id_test.rap"));
        self.ood_test = Some(dir.join("ood_test.rap"));
        self
    }
}

/// Reads a JSON config file into an override map.
pub fn load_config_file(path: &Path) -> Result<Map<String, Value>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
    match serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_owned(), source })? {
        Value::Object(m) => Ok(m),
        _ => Err(ConfigError::NotAnObject { path: path.to_owned() }),
    }
}
