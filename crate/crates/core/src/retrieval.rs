//! Train-time OOD prompt retrieval by joint similarity over a vocabulary.
//!
//! Every vocabulary word gets three scores against the mined
//! representations and the ID prompts:
//!
//! * `sim1`: mean similarity to the outlier representations,
//! * `sim2`: mean similarity to the ID representations,
//! * `sim3`: the η-th nearest-rank percentile of its similarities to the ID
//!   prompts,
//!
//! combined as `λ1·sim1 + λ2·sim2 + λ3·sim3` with `λ1 > 0`, `λ2 < 0`,
//! `λ3 < 0`. The top `P` words are templated into OOD prompts.
//!
//! The means are taken through the representation centroid
//! (`mean_j h·z_j = h·mean_j z_j`), so cost is linear in the vocabulary.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{fold_word, EmbeddingStore, PartOfSpeech, StoreError, StoreKind, VocabEntry, Vocabulary};
use crate::exec::Exec;
use crate::mining::MinedRepresentations;
use crate::vecops::{dot, percentile_low, topk_indices, Direction, EmbeddingMatrix, VecError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("outlier representation set is empty")]
    EmptyOutlierSet,
    #[error("ID representation set is empty")]
    EmptyIdSet,
    #[error("no ID prompts given")]
    EmptyIdPrompts,
    #[error("score vectors differ in length: {0}, {1}, {2}")]
    LengthMismatch(usize, usize, usize),
    #[error("retrieval config: {0}")]
    Config(String),
    #[error("class name list is empty")]
    EmptyClassList,
    #[error("class name at position {0} is empty")]
    EmptyClassName(usize),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Vec(#[from] VecError),
}

/// Joint-similarity coefficients and the sim3 percentile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSimWeights {
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    eta: f64,
}

impl JointSimWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, eta: f64) -> Result<Self, RetrievalError> {
        if !(lambda1 > 0.0) {
            return Err(RetrievalError::Config(format!("lambda1 must be > 0, got {lambda1}")));
        }
        if !(lambda2 < 0.0) {
            return Err(RetrievalError::Config(format!("lambda2 must be < 0, got {lambda2}")));
        }
        if !(lambda3 < 0.0) {
            return Err(RetrievalError::Config(format!("lambda3 must be < 0, got {lambda3}")));
        }
        if !(eta > 0.0 && eta <= 100.0) {
            return Err(RetrievalError::Config(format!("eta must be in (0, 100], got {eta}")));
        }
        Ok(Self { lambda1, lambda2, lambda3, eta })
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn lambda3(&self) -> f64 {
        self.lambda3
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

/// Zeroes individual similarity terms before the weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub disable_sim1: bool,
    pub disable_sim2: bool,
    pub disable_sim3: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimComponents {
    pub sim1: f32,
    pub sim2: f32,
    pub sim3: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub selected: Vec<VocabEntry>,
    /// Positions of the selected words in the vocabulary.
    pub vocab_indices: Vec<usize>,
    /// Descending.
    pub joint_scores: Vec<f32>,
    pub components: Vec<SimComponents>,
}

#[derive(Debug, Clone, Copy)]
pub struct RetrievalOptions {
    pub ablation: Ablation,
    /// Drop words equal (case-folded) to an ID class name.
    pub filter_id_names: bool,
    pub exec: Exec,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        Self { ablation: Ablation::default(), filter_id_names: true, exec: Exec::default() }
    }
}

fn centroid_sims(words: &EmbeddingMatrix, reps: &EmbeddingMatrix, exec: Exec) -> Result<Vec<f32>, VecError> {
    if words.dim() != reps.dim() {
        return Err(VecError::DimMismatch { left: words.dim(), right: reps.dim() });
    }
    let c = reps.mean_row().ok_or(VecError::EmptyInput)?;
    Ok(exec.map_range(words.rows(), |i| {
        words.row(i).iter().zip(&c).map(|(&w, &m)| w as f64 * m).sum::<f64>() as f32
    }))
}

/// Mean similarity of each word to the outlier representations.
pub fn sim1_vector(words: &EmbeddingMatrix, z_ood: &EmbeddingMatrix) -> Result<Vec<f32>, RetrievalError> {
    sim1_vector_with(words, z_ood, Exec::default())
}

pub fn sim1_vector_with(
    words: &EmbeddingMatrix,
    z_ood: &EmbeddingMatrix,
    exec: Exec,
) -> Result<Vec<f32>, RetrievalError> {
    if z_ood.is_empty() {
        return Err(RetrievalError::EmptyOutlierSet);
    }
    Ok(centroid_sims(words, z_ood, exec)?)
}

/// Mean similarity of each word to the ID representations.
pub fn sim2_vector(words: &EmbeddingMatrix, z_id: &EmbeddingMatrix) -> Result<Vec<f32>, RetrievalError> {
    sim2_vector_with(words, z_id, Exec::default())
}

pub fn sim2_vector_with(
    words: &EmbeddingMatrix,
    z_id: &EmbeddingMatrix,
    exec: Exec,
) -> Result<Vec<f32>, RetrievalError> {
    if z_id.is_empty() {
        return Err(RetrievalError::EmptyIdSet);
    }
    Ok(centroid_sims(words, z_id, exec)?)
}

/// Low percentile of each word's similarities to the ID prompts.
pub fn sim3_vector(
    words: &EmbeddingMatrix,
    id_prompts: &EmbeddingMatrix,
    eta: f64,
) -> Result<Vec<f32>, RetrievalError> {
    sim3_vector_with(words, id_prompts, eta, Exec::default())
}

pub fn sim3_vector_with(
    words: &EmbeddingMatrix,
    id_prompts: &EmbeddingMatrix,
    eta: f64,
    exec: Exec,
) -> Result<Vec<f32>, RetrievalError> {
    if id_prompts.is_empty() {
        return Err(RetrievalError::EmptyIdPrompts);
    }
    if words.dim() != id_prompts.dim() {
        return Err(VecError::DimMismatch { left: words.dim(), right: id_prompts.dim() }.into());
    }
    let per_word = exec.map_range(words.rows(), |i| {
        let w = words.row(i);
        let sims: Vec<f32> = id_prompts.iter_rows().map(|p| dot(w, p)).collect();
        percentile_low(&sims, eta)
    });
    Ok(per_word.into_iter().collect::<Result<_, _>>()?)
}

/// Elementwise `λ1·s1 + λ2·s2 + λ3·s3`.
pub fn joint_similarity(
    s1: &[f32],
    s2: &[f32],
    s3: &[f32],
    w: &JointSimWeights,
) -> Result<Vec<f32>, RetrievalError> {
    joint_similarity_ablated(s1, s2, s3, w, Ablation::default())
}

pub fn joint_similarity_ablated(
    s1: &[f32],
    s2: &[f32],
    s3: &[f32],
    w: &JointSimWeights,
    ablation: Ablation,
) -> Result<Vec<f32>, RetrievalError> {
    if s1.len() != s2.len() || s1.len() != s3.len() {
        return Err(RetrievalError::LengthMismatch(s1.len(), s2.len(), s3.len()));
    }
    let keep = |off: bool| if off { 0.0 } else { 1.0 };
    let (k1, k2, k3) = (keep(ablation.disable_sim1), keep(ablation.disable_sim2), keep(ablation.disable_sim3));
    Ok(s1
        .iter()
        .zip(s2)
        .zip(s3)
        .map(|((&a, &b), &c)| {
            (k1 * w.lambda1 * a as f64 + k2 * w.lambda2 * b as f64 + k3 * w.lambda3 * c as f64) as f32
        })
        .collect())
}

/// Selects the top-`p` vocabulary words by joint similarity.
pub fn retrieve_train_prompts(
    vocab: &Vocabulary,
    mined: &MinedRepresentations,
    id_prompts: &EmbeddingStore,
    w: &JointSimWeights,
    p: usize,
    opts: &RetrievalOptions,
) -> Result<RetrievalResult, RetrievalError> {
    id_prompts.expect_kind(StoreKind::IdPrompts)?;
    let words = vocab.word_embeddings();
    let candidates: Vec<usize> = if opts.filter_id_names {
        let id_names: BTreeSet<String> = id_prompts.labels.iter().map(|l| fold_word(l)).collect();
        (0..vocab.len()).filter(|&i| !id_names.contains(&fold_word(&vocab.entries()[i].word))).collect()
    } else {
        (0..vocab.len()).collect()
    };
    if p > candidates.len() {
        return Err(RetrievalError::Config(format!(
            "P = {p} exceeds the {} retrievable vocabulary words",
            candidates.len()
        )));
    }
    let cand = words.select(&candidates);
    let s1 = sim1_vector_with(&cand, &mined.z_ood, opts.exec)?;
    let s2 = sim2_vector_with(&cand, &mined.z_id, opts.exec)?;
    let s3 = sim3_vector_with(&cand, &id_prompts.matrix, w.eta, opts.exec)?;
    let joint = joint_similarity_ablated(&s1, &s2, &s3, w, opts.ablation)?;
    let top = topk_indices(&joint, p, Direction::Highest);
    let vocab_indices: Vec<usize> = top.iter().map(|&t| candidates[t]).collect();
    Ok(RetrievalResult {
        selected: vocab_indices.iter().map(|&i| vocab.entries()[i].clone()).collect(),
        joint_scores: top.iter().map(|&t| joint[t]).collect(),
        components: top.iter().map(|&t| SimComponents { sim1: s1[t], sim2: s2[t], sim3: s3[t] }).collect(),
        vocab_indices,
    })
}

/// OOD prompt text for one word.
pub fn template(word: &str, pos: PartOfSpeech) -> String {
    match pos {
        PartOfSpeech::Noun => format!("the nice {word}"),
        PartOfSpeech::Adjective => format!("This is a {word} photo"),
    }
}

pub fn apply_templates(words: &[VocabEntry]) -> Vec<String> {
    words.iter().map(|e| template(&e.word, e.pos)).collect()
}

/// `"a photo of a {class}"` for each class, in order.
pub fn build_id_prompts<S: AsRef<str>>(class_names: &[S]) -> Result<Vec<String>, RetrievalError> {
    if class_names.is_empty() {
        return Err(RetrievalError::EmptyClassList);
    }
    class_names
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let c = c.as_ref().trim();
            if c.is_empty() {
                Err(RetrievalError::EmptyClassName(i))
            } else {
                Ok(format!("a photo of a {c}"))
            }
        })
        .collect()
}
