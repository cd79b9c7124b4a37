//! Test-time prompt adaptation.
//!
//! Samples are scored in stream order against the current bank snapshot.
//! A sample whose ID score falls inside the band `[u1, u2]` is treated as a
//! confidently detected OOD sample: the `q` vocabulary words closest to it are
//! templated into new OOD prompts and added to the bank before the next sample
//! is scored. Every sample is scored exactly once in online mode.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{fold_word, EmbeddingStore, VocabEntry, Vocabulary};
use crate::detector::{score_batch_with, DetectError, DetectorConfig, OodPrompt, PromptBank, PromptOrigin, SampleScore};
use crate::exec::Exec;
use crate::vecops::{sims_to_row, topk_indices, Direction, VecError};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("band config: {0}")]
    Config(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Vec(#[from] VecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub u1: f64,
    pub u2: f64,
    /// Words retrieved per valuable sample.
    pub q: usize,
    /// Upper bound on test-time prompts; `None` is unlimited.
    pub max_test_prompts: Option<usize>,
}

impl BandConfig {
    pub fn new(u1: f64, u2: f64, q: usize) -> Result<Self, AdaptError> {
        let b = Self { u1, u2, q, max_test_prompts: None };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.u1 <= self.u2) {
            return Err(AdaptError::Config(format!("u1 = {} exceeds u2 = {}", self.u1, self.u2)));
        }
        Ok(())
    }
}

/// `u1 ≤ score ≤ u2`, both ends inclusive.
pub fn is_valuable(score: f64, band: &BandConfig) -> bool {
    band.u1 <= score && score <= band.u2
}

/// A vocabulary word picked for one test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedWord {
    /// Position in the vocabulary.
    pub index: usize,
    pub entry: VocabEntry,
    pub sim: f32,
}

/// The `q` words most similar to `z`, skipping words whose case-folded form
/// is in `exclude`. Returns fewer than `q` when the vocabulary runs out.
pub fn retrieve_test_prompts(
    z: &[f32],
    vocab: &Vocabulary,
    q: usize,
    exclude: &BTreeSet<String>,
) -> Result<Vec<RetrievedWord>, AdaptError> {
    if q == 0 {
        return Ok(Vec::new());
    }
    let sims = sims_to_row(vocab.word_embeddings(), z)?;
    // Enough candidates to survive every exclusion.
    let order = topk_indices(&sims, q.saturating_add(exclude.len()), Direction::Highest);
    Ok(order
        .into_iter()
        .filter(|&i| !exclude.contains(&fold_word(&vocab.entries()[i].word)))
        .take(q)
        .map(|i| RetrievedWord { index: i, entry: vocab.entries()[i].clone(), sim: sims[i] })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub sample_id: String,
    pub added: Vec<String>,
    pub bank_version: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateOutcome {
    pub appended: Vec<String>,
    /// Additions dropped because the test-time cap was reached.
    pub capped: usize,
}

/// Bank plus the dedup ledger. The stream processor is its only writer.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    bank: PromptBank,
    accepted_words: BTreeSet<String>,
    id_names: BTreeSet<String>,
    update_log: Vec<UpdateRecord>,
    cap_warned: bool,
}

impl AdaptationState {
    /// Seeds the ledger with the bank's existing OOD words so test-time
    /// retrieval never re-adds them.
    pub fn new(bank: PromptBank) -> Self {
        let id_names: BTreeSet<String> = bank.id_labels().iter().map(|l| fold_word(l)).collect();
        let accepted_words = bank
            .ood_meta()
            .iter()
            .map(|m| fold_word(&m.word))
            .filter(|w| !id_names.contains(w))
            .collect();
        Self { bank, accepted_words, id_names, update_log: Vec::new(), cap_warned: false }
    }

    pub fn bank(&self) -> &PromptBank {
        &self.bank
    }

    pub fn into_bank(self) -> PromptBank {
        self.bank
    }

    pub fn accepted_words(&self) -> &BTreeSet<String> {
        &self.accepted_words
    }

    pub fn update_log(&self) -> &[UpdateRecord] {
        &self.update_log
    }

    pub fn test_prompt_count(&self) -> usize {
        self.bank.count_origin(PromptOrigin::Test)
    }

    /// Words test-time retrieval must skip: accepted words and ID names.
    pub fn exclusion_set(&self) -> BTreeSet<String> {
        self.accepted_words.union(&self.id_names).cloned().collect()
    }

    /// Appends unseen words as test-time prompts, each to the smallest group.
    /// The bank version advances once iff something was appended.
    pub fn update_bank(
        &mut self,
        vocab: &Vocabulary,
        new: &[RetrievedWord],
        sample_id: &str,
        max_test_prompts: Option<usize>,
    ) -> Result<UpdateOutcome, AdaptError> {
        let mut out = UpdateOutcome::default();
        for w in new {
            let key = fold_word(&w.entry.word);
            if self.accepted_words.contains(&key) || self.id_names.contains(&key) {
                continue;
            }
            if max_test_prompts.is_some_and(|cap| self.test_prompt_count() >= cap) {
                out.capped += 1;
                continue;
            }
            let meta = OodPrompt { word: w.entry.word.clone(), pos: w.entry.pos, origin: PromptOrigin::Test };
            self.bank.append_ood(meta, vocab.prompt_embedding(w.index))?;
            self.accepted_words.insert(key);
            out.appended.push(w.entry.word.clone());
        }
        if out.capped > 0 {
            if self.cap_warned {
                log::debug!("test-time prompt cap: dropped {} additions from {sample_id}", out.capped);
            } else {
                log::warn!("test-time prompt cap reached at {sample_id}; later additions are dropped");
                self.cap_warned = true;
            }
        }
        if !out.appended.is_empty() {
            self.bank.bump_version();
            self.update_log.push(UpdateRecord {
                sample_id: sample_id.to_owned(),
                added: out.appended.clone(),
                bank_version: self.bank.version(),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    #[default]
    Online,
    /// Online pass, then every sample rescored against the final bank.
    TwoPass,
}

impl std::str::FromStr for StreamMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "online" => Ok(StreamMode::Online),
            "two-pass" => Ok(StreamMode::TwoPass),
            other => Err(format!("unknown stream mode {other:?} (expected online or two-pass)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StreamOptions {
    pub mode: StreamMode,
    /// Samples scored speculatively against one snapshot.
    pub batch: usize,
    pub exec: Exec,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self { mode: StreamMode::Online, batch: 256, exec: Exec::default() }
    }
}

#[derive(Debug, Clone)]
pub struct StreamOutcome {
    /// One report per sample, in stream order, as scored online.
    pub reports: Vec<SampleScore>,
    /// Two-pass mode only: every sample rescored against the final bank.
    pub rescored: Option<Vec<SampleScore>>,
    pub state: AdaptationState,
}

impl StreamOutcome {
    /// The reports evaluation should use for the chosen mode.
    pub fn final_reports(&self) -> &[SampleScore] {
        self.rescored.as_deref().unwrap_or(&self.reports)
    }
}

/// Runs the adaptation loop over `samples` in row order.
///
/// A batch is scored in parallel against the current snapshot, then walked
/// in order. When a valuable sample changes the bank, the speculative scores
/// after it are dropped and scoring resumes with the new snapshot, so results
/// equal a strictly sequential loop.
pub fn process_stream(
    samples: &EmbeddingStore,
    mut state: AdaptationState,
    vocab: &Vocabulary,
    det_cfg: &DetectorConfig,
    band: &BandConfig,
    opts: &StreamOptions,
) -> Result<StreamOutcome, AdaptError> {
    det_cfg.validate()?;
    band.validate()?;
    if vocab.dim() != state.bank.dim() {
        return Err(VecError::DimMismatch { left: state.bank.dim(), right: vocab.dim() }.into());
    }
    let n = samples.count();
    let batch = opts.batch.max(1);
    let mut reports = Vec::with_capacity(n);
    let mut next = 0;
    while next < n {
        let end = (next + batch).min(n);
        let scored = score_batch_with(samples, next..end, &state.bank, det_cfg, opts.exec)?;
        let mut resume = end;
        for (k, r) in scored.into_iter().enumerate() {
            let i = next + k;
            let valuable = is_valuable(r.score, band);
            reports.push(r);
            if !valuable {
                continue;
            }
            let words = retrieve_test_prompts(samples.matrix.row(i), vocab, band.q, &state.exclusion_set())?;
            let outcome = state.update_bank(vocab, &words, &samples.labels[i], band.max_test_prompts)?;
            if !outcome.appended.is_empty() {
                resume = i + 1;
                break;
            }
        }
        next = resume;
    }
    let rescored = match opts.mode {
        StreamMode::Online => None,
        StreamMode::TwoPass => Some(score_batch_with(samples, 0..n, &state.bank, det_cfg, opts.exec)?),
    };
    Ok(StreamOutcome { reports, rescored, state })
}
