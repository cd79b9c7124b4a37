//! Desk-scale synthetic benchmark on the unit hypersphere.
//!
//! Image embeddings share an image cone direction and text embeddings a text
//! cone direction. Classes come in sibling pairs, OOD clusters borrow part
//! of one class's content, and training backgrounds come from the OOD
//! clusters, so mined outliers point at the planted near-OOD words.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{CropTag, EmbeddingStore, PartOfSpeech, StoreKind, Tags, VocabPair};
use crate::retrieval::template;
use crate::vecops::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub k_classes: usize,
    pub vocab_size: usize,
    pub samples_per_class: usize,
    /// OOD clusters visible as training backgrounds and used for the OOD test set.
    pub n_ood_clusters: usize,
    /// Inverse squared noise radius of image samples around their anchor.
    pub concentration: f64,
    pub planted_near_ood_words: usize,
    pub seed: u64,
    pub ood_samples: usize,
    pub shots_per_class: usize,
    pub crops_per_image: usize,
    /// OOD clusters never seen in training; they feed the drift stream.
    pub n_drift_clusters: usize,
    pub planted_drift_words: usize,
    pub image_cone: f64,
    pub text_cone: f64,
    /// Weight of the borrowed class content in train OOD clusters.
    pub ood_class_mix: f64,
    /// Same for drift clusters.
    pub drift_class_mix: f64,
    /// How much sibling classes share.
    pub sibling_overlap: f64,
    pub text_noise: f64,
    pub template_noise: f64,
    /// Image-cone weight of the near-ID distractor words.
    pub distractor_cone: f64,
    /// Weight of the mean class direction in the distractor words.
    pub distractor_class_mean: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            k_classes: 10,
            vocab_size: 5000,
            samples_per_class: 50,
            n_ood_clusters: 2,
            concentration: 4.0,
            planted_near_ood_words: 20,
            seed: 7,
            ood_samples: 500,
            shots_per_class: 2,
            crops_per_image: 16,
            n_drift_clusters: 4,
            planted_drift_words: 40,
            image_cone: 1.0,
            text_cone: 1.0,
            ood_class_mix: 0.6,
            drift_class_mix: 0.8,
            sibling_overlap: 0.6,
            text_noise: 0.3,
            template_noise: 0.1,
            distractor_cone: 0.25,
            distractor_class_mean: 0.5,
        }
    }
}

impl SyntheticConfig {
    fn basis_size(&self) -> usize {
        2 + self.k_classes + self.n_ood_clusters + self.n_drift_clusters
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let counts = [
            ("dim", self.dim),
            ("k_classes", self.k_classes),
            ("vocab_size", self.vocab_size),
            ("samples_per_class", self.samples_per_class),
            ("n_ood_clusters", self.n_ood_clusters),
            ("planted_near_ood_words", self.planted_near_ood_words),
            ("ood_samples", self.ood_samples),
            ("shots_per_class", self.shots_per_class),
            ("crops_per_image", self.crops_per_image),
        ];
        if let Some((key, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(EvalError::Config(format!("{key} must be at least 1")));
        }
        if !(self.concentration > 0.0) {
            return Err(EvalError::Config("concentration must be > 0".into()));
        }
        if self.basis_size() > self.dim {
            return Err(EvalError::Config(format!(
                "dim {} cannot hold {} orthogonal directions",
                self.dim,
                self.basis_size()
            )));
        }
        if self.n_drift_clusters == 0 && self.planted_drift_words > 0 {
            return Err(EvalError::Config("planted_drift_words needs n_drift_clusters >= 1".into()));
        }
        let planted = 2 * self.planted_near_ood_words + self.planted_drift_words;
        if planted > self.vocab_size {
            return Err(EvalError::Config(format!(
                "vocab_size {} is smaller than the {planted} planted words",
                self.vocab_size
            )));
        }
        let weights = [
            ("image_cone", self.image_cone),
            ("text_cone", self.text_cone),
            ("ood_class_mix", self.ood_class_mix),
            ("drift_class_mix", self.drift_class_mix),
            ("sibling_overlap", self.sibling_overlap),
            ("text_noise", self.text_noise),
            ("template_noise", self.template_noise),
            ("distractor_cone", self.distractor_cone),
            ("distractor_class_mean", self.distractor_class_mean),
        ];
        if let Some((key, _)) = weights.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(EvalError::Config(format!("{key} must be finite and >= 0")));
        }
        if self.sibling_overlap >= 1.0 {
            return Err(EvalError::Config("sibling_overlap must be < 1".into()));
        }
        Ok(())
    }
}

/// What kind of word a synthetic vocabulary label denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WordKind {
    Random,
    NearOod,
    Distractor,
    Drift,
}

pub fn word_kind(label: &str) -> WordKind {
    if label.starts_with("nearood") {
        WordKind::NearOod
    } else if label.starts_with("nearid") {
        WordKind::Distractor
    } else if label.starts_with("drift") {
        WordKind::Drift
    } else {
        WordKind::Random
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub id_prompts: EmbeddingStore,
    pub vocab: EmbeddingStore,
    pub crops: EmbeddingStore,
    pub id_test: EmbeddingStore,
    pub ood_test: EmbeddingStore,
    /// OOD samples from clusters absent from training.
    pub drift_test: EmbeddingStore,
}

impl SyntheticData {
    /// `(file name, store)` for every store, in a fixed order.
    pub fn stores(&self) -> [(&'static str, &EmbeddingStore); 6] {
        [
            ("id_prompts.rap", &self.id_prompts),
            ("vocab.rap", &self.vocab),
            ("crops.rap", &self.crops),
            ("id_test.rap", &self.id_test),
            ("ood_test.rap", &self.ood_test),
            ("drift_test.rap", &self.drift_test),
        ]
    }
}

type Vector = Vec<f64>;

struct Space {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Space {
    fn gaussian(&mut self, scale: f64) -> Vector {
        let s = scale / (self.dim as f64).sqrt();
        (0..self.dim).map(|_| self.rng.sample::<f64, _>(StandardNormal) * s).collect()
    }

    /// Orthonormal directions by Gram-Schmidt over Gaussian draws.
    fn orthonormal(&mut self, n: usize) -> Vec<Vector> {
        let mut out: Vec<Vector> = Vec::with_capacity(n);
        while out.len() < n {
            let mut v = self.gaussian(1.0);
            for b in &out {
                let p = dotf(&v, b);
                axpy(&mut v, -p, b);
            }
            if norm(&v) > 1e-6 {
                out.push(unit(&v));
            }
        }
        out
    }

    /// `normalize(center + noise)`.
    fn around(&mut self, center: &[f64], noise: f64) -> Vec<f32> {
        let mut v = self.gaussian(noise);
        axpy(&mut v, 1.0, center);
        to_f32(&unit(&v))
    }
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dotf(v, v).sqrt()
}

fn unit(v: &[f64]) -> Vector {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn combo(terms: &[(f64, &[f64])]) -> Vector {
    let mut v = vec![0.0; terms[0].1.len()];
    for (a, x) in terms {
        axpy(&mut v, *a, x);
    }
    v
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn matrix(dim: usize, rows: &[Vec<f32>]) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(dim, rows).expect("rows are built with the configured dim")
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData, EvalError> {
    cfg.validate()?;
    let d = cfg.dim;
    let k = cfg.k_classes;
    let mut sp = Space { rng: ChaCha8Rng::seed_from_u64(cfg.seed), dim: d };
    let sigma = 1.0 / cfg.concentration.sqrt();

    let basis = sp.orthonormal(cfg.basis_size());
    let g = basis[0].clone();
    let h = basis[1].clone();
    let mut class_dirs: Vec<Vector> = basis[2..2 + k].to_vec();
    for j in (0..k.saturating_sub(1)).step_by(2) {
        let shared = class_dirs[j].clone();
        for c in [j, j + 1] {
            class_dirs[c] = unit(&combo(&[(cfg.sibling_overlap, &shared), (1.0 - cfg.sibling_overlap, &class_dirs[c])]));
        }
    }
    let ood_dirs = &basis[2 + k..2 + k + cfg.n_ood_clusters];
    let drift_dirs = &basis[2 + k + cfg.n_ood_clusters..];
    let ood_class: Vec<usize> = (0..cfg.n_ood_clusters).map(|_| sp.rng.random_range(0..k)).collect();
    let drift_class: Vec<usize> = (0..cfg.n_drift_clusters).map(|_| sp.rng.random_range(0..k)).collect();

    // content shared by OOD anchors and their text words, without any cone
    let ood_content: Vec<Vector> = (0..cfg.n_ood_clusters)
        .map(|i| combo(&[(cfg.ood_class_mix, &class_dirs[ood_class[i]]), (1.0, &ood_dirs[i])]))
        .collect();
    let drift_content: Vec<Vector> = (0..cfg.n_drift_clusters)
        .map(|i| combo(&[(cfg.drift_class_mix, &class_dirs[drift_class[i]]), (1.0, &drift_dirs[i])]))
        .collect();
    let image = |content: &[f64]| unit(&combo(&[(cfg.image_cone, &g), (1.0, content)]));
    let class_anchor: Vec<Vector> = class_dirs.iter().map(|c| image(c)).collect();
    let ood_anchor: Vec<Vector> = ood_content.iter().map(|c| image(c)).collect();
    let drift_anchor: Vec<Vector> = drift_content.iter().map(|c| image(c)).collect();

    let class_names: Vec<String> = (0..k).map(|c| format!("class{c}")).collect();
    let prompts: Vec<Vec<f32>> = class_dirs
        .iter()
        .map(|u| sp.around(&combo(&[(cfg.text_cone, &h), (1.0, u)]), cfg.text_noise))
        .collect();
    let id_prompts = EmbeddingStore::untagged(StoreKind::IdPrompts, matrix(d, &prompts), class_names);

    let vocab = build_vocab(cfg, &mut sp, &g, &h, &class_dirs, &ood_content, &drift_content);

    let mut crop_rows = Vec::new();
    let mut crop_labels = Vec::new();
    let mut crop_tags = Vec::new();
    for c in 0..k {
        for s in 0..cfg.shots_per_class {
            let image_id = c * cfg.shots_per_class + s;
            let bg = image_id % cfg.n_ood_clusters;
            for j in 0..cfg.crops_per_image {
                let t: f64 = sp.rng.random();
                let center =
                    combo(&[(cfg.image_cone, &g), (t, &class_dirs[c]), (1.0 - t, &ood_content[bg])]);
                crop_rows.push(sp.around(&center, sigma));
                crop_labels.push(format!("img{image_id}/crop{j}"));
                crop_tags.push(CropTag { source_image: image_id as u64, source_class: c as u32 });
            }
        }
    }
    let crops = EmbeddingStore {
        kind: StoreKind::Crops,
        matrix: matrix(d, &crop_rows),
        labels: crop_labels,
        tags: Tags::Crops(crop_tags),
    };

    let mut id_rows = Vec::new();
    let mut id_labels = Vec::new();
    for (c, a) in class_anchor.iter().enumerate() {
        for n in 0..cfg.samples_per_class {
            id_rows.push(sp.around(a, sigma));
            id_labels.push(format!("id{c}_{n}"));
        }
    }
    let id_test = EmbeddingStore::untagged(StoreKind::Images, matrix(d, &id_rows), id_labels);
    let ood_test = cluster_samples(&mut sp, &ood_anchor, cfg.ood_samples, sigma, "ood");
    let drift_test = cluster_samples(&mut sp, &drift_anchor, cfg.ood_samples, sigma, "drift");

    Ok(SyntheticData { id_prompts, vocab, crops, id_test, ood_test, drift_test })
}

fn cluster_samples(sp: &mut Space, anchors: &[Vector], n: usize, sigma: f64, tag: &str) -> EmbeddingStore {
    let dim = sp.dim;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    if !anchors.is_empty() {
        for i in 0..n {
            let c = i % anchors.len();
            rows.push(sp.around(&anchors[c], sigma));
            labels.push(format!("{tag}{c}_{i}"));
        }
    }
    EmbeddingStore::untagged(StoreKind::Images, matrix(dim, &rows), labels)
}

fn build_vocab(
    cfg: &SyntheticConfig,
    sp: &mut Space,
    g: &[f64],
    h: &[f64],
    class_dirs: &[Vector],
    ood_content: &[Vector],
    drift_content: &[Vector],
) -> EmbeddingStore {
    let text = |content: &[f64]| combo(&[(cfg.text_cone, h), (1.0, content)]);
    let class_mean = unit(&class_dirs.iter().fold(vec![0.0; cfg.dim], |mut acc, c| {
        axpy(&mut acc, 1.0, c);
        acc
    }));
    let mut words: Vec<(String, PartOfSpeech, Vec<f32>)> = Vec::with_capacity(cfg.vocab_size);
    for i in 0..cfg.planted_near_ood_words {
        let c = i % ood_content.len();
        let e = sp.around(&text(&ood_content[c]), cfg.text_noise);
        words.push((format!("nearood{c}_{i}"), PartOfSpeech::Noun, e));
    }
    for i in 0..cfg.planted_near_ood_words {
        let center = combo(&[(cfg.text_cone, h), (cfg.distractor_cone, g), (cfg.distractor_class_mean, &class_mean)]);
        let e = sp.around(&center, cfg.text_noise);
        words.push((format!("nearid{i}"), PartOfSpeech::Noun, e));
    }
    for i in 0..cfg.planted_drift_words {
        let c = i % drift_content.len();
        let e = sp.around(&text(&drift_content[c]), cfg.text_noise);
        words.push((format!("drift{c}_{i}"), PartOfSpeech::Noun, e));
    }
    let n_random = cfg.vocab_size - words.len();
    for i in 0..n_random {
        let content = unit(&sp.gaussian(1.0));
        let e = to_f32(&unit(&text(&content)));
        let pos = if i % 3 == 2 { PartOfSpeech::Adjective } else { PartOfSpeech::Noun };
        words.push((format!("word{i}"), pos, e));
    }
    words.shuffle(&mut sp.rng);
    let pairs: Vec<VocabPair> = words
        .into_iter()
        .map(|(word, pos, e)| {
            let center: Vector = e.iter().map(|&x| x as f64).collect();
            let prompt_embedding = sp.around(&center, cfg.template_noise);
            VocabPair { prompt: template(&word, pos), word, pos, word_embedding: e, prompt_embedding }
        })
        .collect();
    EmbeddingStore::vocabulary_from_pairs(cfg.dim, pairs).expect("synthetic vocabulary rows match dim")
}
