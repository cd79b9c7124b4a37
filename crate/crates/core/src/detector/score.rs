use serde::{Deserialize, Serialize};

use super::{detect, DetectError, DetectorConfig, PromptBank, Verdict};
use crate::corpus::EmbeddingStore;
use crate::exec::Exec;
use crate::vecops::{cmp_scores, dot, sims_to_row, EmbeddingMatrix, VecError};

/// `log Σ exp(s / τ)`, shifted by the maximum so nothing overflows.
fn log_sum_exp<'a, I: IntoIterator<Item = &'a f32> + Clone>(sims: I, tau: f64) -> Option<f64> {
    let max = sims.clone().into_iter().copied().max_by(|a, b| cmp_scores(*a, *b))? as f64;
    let sum: f64 = sims.into_iter().map(|&s| ((s as f64 - max) / tau).exp()).sum();
    Some(max / tau + sum.ln())
}

/// `S = Σ_id φ / (Σ_id φ + Σ_ood φ)` with `φ = exp(sim / τ)`, rewritten as
/// `1 / (1 + exp(lse_ood - lse_id))`. An empty OOD set gives exactly 1.
fn ratio_score(lse_id: f64, lse_ood: Option<f64>) -> f64 {
    match lse_ood {
        None => 1.0,
        Some(lse_ood) => 1.0 / (1.0 + (lse_ood - lse_id).exp()),
    }
}

/// Index of the most similar ID prompt; ties go to the lower class index.
pub fn classify_id(z: &[f32], bank: &PromptBank) -> Result<usize, DetectError> {
    let sims = sims_to_row(bank.id_prompts(), z)?;
    Ok(argmax(&sims))
}

fn argmax(sims: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate().skip(1) {
        if cmp_scores(s, sims[best]).is_gt() {
            best = i;
        }
    }
    best
}

/// ID score of `z` against one set of ID and OOD prompt embeddings.
pub fn id_score(
    z: &[f32],
    id_embs: &EmbeddingMatrix,
    ood_embs: &EmbeddingMatrix,
    tau: f64,
) -> Result<f64, DetectError> {
    if id_embs.is_empty() {
        return Err(DetectError::InvalidBank("no ID prompts".into()));
    }
    let id_sims = sims_to_row(id_embs, z)?;
    if ood_embs.dim() != z.len() {
        return Err(VecError::DimMismatch { left: ood_embs.dim(), right: z.len() }.into());
    }
    let ood_sims = sims_to_row(ood_embs, z)?;
    let lse_id = log_sum_exp(&id_sims, tau).expect("non-empty");
    Ok(ratio_score(lse_id, log_sum_exp(&ood_sims, tau)))
}

/// Mean of the per-group ID scores given precomputed similarities.
/// Empty groups contribute 1.
pub fn grouped_score_from_sims(id_sims: &[f32], ood_sims: &[f32], groups: &[Vec<usize>], tau: f64) -> f64 {
    let lse_id = log_sum_exp(id_sims, tau).expect("at least one ID prompt");
    let total: f64 = groups
        .iter()
        .map(|g| ratio_score(lse_id, log_sum_exp(g.iter().map(|&i| &ood_sims[i]), tau)))
        .sum();
    total / groups.len() as f64
}

/// Ensemble score: mean over the bank's groups of [`id_score`].
pub fn grouped_score(z: &[f32], bank: &PromptBank, tau: f64) -> Result<f64, DetectError> {
    let id_sims = sims_to_row(bank.id_prompts(), z)?;
    let ood_sims = sims_to_row(bank.ood_prompts(), z)?;
    Ok(grouped_score_from_sims(&id_sims, &ood_sims, bank.groups(), tau))
}

/// Maximum softmax probability over the ID prompts alone.
pub fn mcm_baseline_score(z: &[f32], id_embs: &EmbeddingMatrix, tau: f64) -> Result<f64, DetectError> {
    if id_embs.is_empty() {
        return Err(DetectError::InvalidBank("no ID prompts".into()));
    }
    let sims = sims_to_row(id_embs, z)?;
    let max = sims[argmax(&sims)] as f64;
    let denom: f64 = sims.iter().map(|&s| ((s as f64 - max) / tau).exp()).sum();
    Ok(1.0 / denom)
}

/// One line of a score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub class_pred: usize,
    pub score: f64,
    pub verdict: Verdict,
    pub bank_version: u64,
}

/// Scores one sample against a bank snapshot.
pub fn score_sample(sample_id: &str, z: &[f32], bank: &PromptBank, cfg: &DetectorConfig) -> Result<SampleScore, DetectError> {
    if z.len() != bank.dim() {
        return Err(VecError::DimMismatch { left: bank.dim(), right: z.len() }.into());
    }
    let id_sims: Vec<f32> = bank.id_prompts().iter_rows().map(|p| dot(p, z)).collect();
    let ood_sims: Vec<f32> = bank.ood_prompts().iter_rows().map(|p| dot(p, z)).collect();
    let score = grouped_score_from_sims(&id_sims, &ood_sims, bank.groups(), cfg.tau);
    Ok(SampleScore {
        sample_id: sample_id.to_owned(),
        class_pred: argmax(&id_sims),
        score,
        verdict: detect(score, cfg.gamma),
        bank_version: bank.version(),
    })
}

pub fn score_batch(images: &EmbeddingStore, bank: &PromptBank, cfg: &DetectorConfig) -> Result<Vec<SampleScore>, DetectError> {
    score_batch_with(images, 0..images.count(), bank, cfg, Exec::default())
}

/// Scores rows `range` of `images`, in order, against one frozen snapshot.
pub fn score_batch_with(
    images: &EmbeddingStore,
    range: std::ops::Range<usize>,
    bank: &PromptBank,
    cfg: &DetectorConfig,
    exec: Exec,
) -> Result<Vec<SampleScore>, DetectError> {
    if images.dim() != bank.dim() {
        return Err(VecError::DimMismatch { left: bank.dim(), right: images.dim() }.into());
    }
    let start = range.start;
    exec.map_range(range.len(), |k| {
        let i = start + k;
        score_sample(&images.labels[i], images.matrix.row(i), bank, cfg)
    })
    .into_iter()
    .collect()
}
