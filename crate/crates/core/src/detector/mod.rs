//! ID classification, prompt-ratio ID scoring, grouped prompt ensembles and
//! thresholded detection.

mod bank;
mod score;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::StoreError;
use crate::vecops::VecError;

pub use bank::{load_bank, partition_groups, save_bank, LoadedBank, OodPrompt, PromptBank, PromptOrigin, BANK_MAGIC};
pub use score::{
    classify_id, grouped_score, grouped_score_from_sims, id_score, mcm_baseline_score, score_batch,
    score_batch_with, score_sample, SampleScore,
};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detector config: {0}")]
    Config(String),
    #[error("invalid prompt bank: {0}")]
    InvalidBank(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad bank magic, expected \"RAPB\"")]
    BadMagic,
    #[error("unsupported bank format version {0}")]
    UnsupportedVersion(u8),
    #[error("bank file truncated while reading {0}")]
    Truncated(&'static str),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Vec(#[from] VecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// A sample is ID iff its score is at least `gamma`.
    pub gamma: f64,
    pub n_groups: usize,
    pub ensemble_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { tau: 0.01, gamma: 0.5, n_groups: 100, ensemble_seed: 0 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DetectError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(DetectError::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if self.n_groups == 0 {
            return Err(DetectError::Config("n_groups must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

/// `Id` iff `score >= gamma`.
pub fn detect(score: f64, gamma: f64) -> Verdict {
    if score >= gamma {
        Verdict::Id
    } else {
        Verdict::Ood
    }
}
