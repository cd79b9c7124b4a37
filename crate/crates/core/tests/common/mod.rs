#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rap_core::corpus::{CropTag, EmbeddingStore, PartOfSpeech, StoreKind, Tags, VocabPair, Vocabulary};
use rap_core::eval::{generate_synthetic, SyntheticConfig, SyntheticData};
use rap_core::exec::Exec;
use rap_core::mining::{CropProvenance, MinedRepresentations};
use rap_core::pipeline::PipelineInputs;
use rap_core::retrieval::{retrieve_train_prompts, JointSimWeights, RetrievalOptions};
use rap_core::vecops::{dot, EmbeddingMatrix};

pub fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

pub fn units(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingMatrix {
    let rows: Vec<Vec<f32>> = (0..n).map(|_| unit(rng, dim)).collect();
    EmbeddingMatrix::from_rows(dim, &rows).unwrap()
}

pub fn vocabulary(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vocabulary {
    let pairs: Vec<VocabPair> = (0..n)
        .map(|i| VocabPair {
            word: format!("w{i}"),
            pos: if i % 3 == 0 { PartOfSpeech::Adjective } else { PartOfSpeech::Noun },
            word_embedding: unit(rng, dim),
            prompt: format!("the nice w{i}"),
            prompt_embedding: unit(rng, dim),
        })
        .collect();
    Vocabulary::from_store(&EmbeddingStore::vocabulary_from_pairs(dim, pairs).unwrap()).unwrap()
}

pub fn id_prompt_store(m: EmbeddingMatrix) -> EmbeddingStore {
    let labels = (0..m.rows()).map(|i| format!("class{i}")).collect();
    EmbeddingStore::untagged(StoreKind::IdPrompts, m, labels)
}

pub fn crop_store(rng: &mut ChaCha8Rng, images: usize, classes: usize, m: usize, dim: usize) -> EmbeddingStore {
    let mut labels = Vec::new();
    let mut tags = Vec::new();
    let mut rows = Vec::new();
    for img in 0..images {
        let class = rng.random_range(0..classes) as u32;
        for c in 0..m {
            labels.push(format!("img{img}/crop{c}"));
            tags.push(CropTag { source_image: img as u64, source_class: class });
            rows.push(unit(rng, dim));
        }
    }
    EmbeddingStore {
        kind: StoreKind::Crops,
        matrix: EmbeddingMatrix::from_rows(dim, &rows).unwrap(),
        labels,
        tags: Tags::Crops(tags),
    }
}

/// AUROC by counting every (id, ood) pair.
pub fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in id {
        for &b in ood {
            twice += if a > b { 2 } else if a == b { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

/// Tries every observed ID score as a threshold and keeps the largest one
/// reaching the target rate.
pub fn exhaustive_fpr(id: &[f64], ood: &[f64], target: f64) -> (f64, f64) {
    let mut best: Option<f64> = None;
    for &g in id {
        let tpr = id.iter().filter(|&&s| s >= g).count() as f64 / id.len() as f64;
        if tpr >= target && best.is_none_or(|b| g > b) {
            best = Some(g);
        }
    }
    let g = best.unwrap();
    (ood.iter().filter(|&&s| s >= g).count() as f64 / ood.len() as f64, g)
}

/// Scores with plenty of ties: values drawn from a small grid.
pub fn tied_scores(rng: &mut ChaCha8Rng, n: usize, grid: u32) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..=grid) as f64 / grid as f64).collect()
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Joint similarity of every vocabulary word computed from its definition:
/// mean pairwise similarities, and a full sort for the percentile.
pub fn oracle_joint(vocab: &Vocabulary, mined: &MinedRepresentations, prompts: &EmbeddingMatrix, w: &JointSimWeights) -> Vec<f64> {
    let words = vocab.word_embeddings();
    (0..words.rows())
        .map(|i| {
            let x = words.row(i);
            let mean = |m: &EmbeddingMatrix| m.iter_rows().map(|r| dot64(x, r)).sum::<f64>() / m.rows() as f64;
            let mut p: Vec<f64> = prompts.iter_rows().map(|r| dot64(x, r)).collect();
            p.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = ((w.eta() / 100.0 * p.len() as f64).ceil() as usize).clamp(1, p.len());
            w.lambda1() * mean(&mined.z_ood) + w.lambda2() * mean(&mined.z_id) + w.lambda3() * p[rank - 1]
        })
        .collect()
}

/// Synthetic benchmark wired into pipeline inputs. `drift` swaps the OOD
/// test split for the drifted one.
pub fn synthetic_inputs(cfg: &SyntheticConfig, drift: bool) -> (SyntheticData, PipelineInputs) {
    let data = generate_synthetic(cfg).unwrap();
    let inputs = PipelineInputs {
        id_prompts: data.id_prompts.clone(),
        vocab: data.vocab.clone(),
        crops: data.crops.clone(),
        id_test: data.id_test.clone(),
        ood_test: if drift { data.drift_test.clone() } else { data.ood_test.clone() },
    };
    (data, inputs)
}

pub fn assert_mining_boundary(crops: &EmbeddingStore, prompts: &EmbeddingStore, mined: &MinedRepresentations) {
    let Tags::Crops(tags) = &crops.tags else { panic!("crop store without crop tags") };
    let class_of = |img: u64| tags.iter().find(|t| t.source_image == img).unwrap().source_class as usize;
    let images: BTreeSet<u64> = tags.iter().map(|t| t.source_image).collect();
    for img in images {
        let prompt = prompts.matrix.row(class_of(img));
        let side = |m: &EmbeddingMatrix, prov: &[CropProvenance]| -> Vec<f32> {
            prov.iter().zip(m.iter_rows()).filter(|(p, _)| p.source_image == img).map(|(_, r)| dot(r, prompt)).collect()
        };
        let id = side(&mined.z_id, &mined.id_provenance);
        let ood = side(&mined.z_ood, &mined.ood_provenance);
        let min_id = id.iter().copied().fold(f32::INFINITY, f32::min);
        let max_ood = ood.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert!(min_id >= max_ood, "image {img}: {min_id} < {max_ood}");
    }
}

pub fn retrieval_case(rng: &mut ChaCha8Rng, n_words: usize, p: usize) {
    let dim = 8;
    let vocab = vocabulary(rng, n_words, dim);
    let n_prompts = rng.random_range(1..6);
    let prompts = id_prompt_store(units(rng, n_prompts, dim));
    let (n_id, n_ood) = (rng.random_range(1..10), rng.random_range(1..10));
    let mined = MinedRepresentations {
        z_id: units(rng, n_id, dim),
        z_ood: units(rng, n_ood, dim),
        id_provenance: vec![],
        ood_provenance: vec![],
    };
    let w = JointSimWeights::new(
        rng.random_range(0.01..2.0),
        -rng.random_range(0.0..2.0),
        -rng.random_range(0.0..2.0),
        rng.random_range(1.0..=100.0),
    )
    .unwrap();
    let oracle = oracle_joint(&vocab, &mined, &prompts.matrix, &w);
    let mut order: Vec<usize> = (0..n_words).collect();
    order.sort_by(|&a, &b| oracle[b].partial_cmp(&oracle[a]).unwrap().then(a.cmp(&b)));
    for exec in [Exec::Sequential, Exec::Parallel] {
        let opts = RetrievalOptions { exec, ..Default::default() };
        let got = retrieve_train_prompts(&vocab, &mined, &prompts, &w, p, &opts).unwrap();
        assert_retrieval_matches(&got.vocab_indices, &order[..p], &oracle);
    }
}

/// Same selection up to swaps between words whose oracle scores differ by
/// less than float rounding.
pub fn assert_retrieval_matches(got: &[usize], want: &[usize], oracle: &[f64]) {
    const TIE: f64 = 1e-5;
    assert_eq!(got.len(), want.len());
    for (k, (&g, &w)) in got.iter().zip(want).enumerate() {
        assert!((oracle[g] - oracle[w]).abs() < TIE, "rank {k}: got word {g} ({}) want {w} ({})", oracle[g], oracle[w]);
    }
    let cutoff = oracle[*want.last().unwrap()];
    for (i, &s) in oracle.iter().enumerate() {
        if s > cutoff + TIE {
            assert!(got.contains(&i), "word {i} scores {s} above cutoff {cutoff} but was not retrieved");
        }
    }
}
