//! Valuable ID and outlier crop selection from per-image crop embeddings.
//!
//! For every training image, each crop is scored against the prompt of the
//! image's own class. The `L` highest-scoring crops become ID
//! representations and the `L` lowest become outlier representations.
//! Both sides are cut from one sorted order, so they are disjoint whenever
//! `2L ≤ M`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::{EmbeddingStore, StoreError, StoreKind, Tags};
use crate::exec::Exec;
use crate::vecops::{dot, topk_indices, Direction, EmbeddingMatrix, VecError};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("mining config: {0}")]
    Config(String),
    #[error("image {image} has {crops} crops, expected {expected}")]
    Grouping { image: u64, crops: usize, expected: usize },
    #[error("image {image} references class {class} but only {classes} ID prompts exist")]
    ClassIndexOutOfRange { image: u64, class: u32, classes: usize },
    #[error("malformed mined store: {0}")]
    BadProvenance(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Vec(#[from] VecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningConfig {
    /// Crops per training image (`M`).
    pub crops_per_image: usize,
    /// Crops kept per image on each side (`L`).
    pub per_side: usize,
}

impl MiningConfig {
    pub fn new(crops_per_image: usize, per_side: usize) -> Result<Self, MiningError> {
        let cfg = Self { crops_per_image, per_side };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MiningError> {
        if self.crops_per_image == 0 || self.per_side == 0 {
            return Err(MiningError::Config("M and L must both be at least 1".into()));
        }
        if 2 * self.per_side > self.crops_per_image {
            return Err(MiningError::Config(format!(
                "2·L = {} exceeds M = {}; ID and outlier crops would overlap",
                2 * self.per_side,
                self.crops_per_image
            )));
        }
        Ok(())
    }
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { crops_per_image: 256, per_side: 32 }
    }
}

/// Crops picked from one image, in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedCrops {
    pub crop_indices: Vec<usize>,
    pub reps: EmbeddingMatrix,
}

fn select(
    crop_sims: &[f32],
    crops: &EmbeddingMatrix,
    l: usize,
    dir: Direction,
) -> Result<SelectedCrops, MiningError> {
    if crop_sims.len() != crops.rows() {
        return Err(MiningError::Config(format!(
            "{} similarities for {} crops",
            crop_sims.len(),
            crops.rows()
        )));
    }
    if l > crops.rows() {
        return Err(MiningError::Config(format!("L = {l} exceeds M = {}", crops.rows())));
    }
    let crop_indices = topk_indices(crop_sims, l, dir);
    let reps = crops.select(&crop_indices);
    Ok(SelectedCrops { crop_indices, reps })
}

/// The `l` crops most similar to the image's ID prompt.
pub fn select_id_reps(
    crop_sims: &[f32],
    crops: &EmbeddingMatrix,
    l: usize,
) -> Result<SelectedCrops, MiningError> {
    select(crop_sims, crops, l, Direction::Highest)
}

/// The `l` crops least similar to the image's ID prompt.
pub fn select_ood_reps(
    crop_sims: &[f32],
    crops: &EmbeddingMatrix,
    l: usize,
) -> Result<SelectedCrops, MiningError> {
    select(crop_sims, crops, l, Direction::Lowest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropProvenance {
    pub source_image: u64,
    /// Position of the crop among its image's crops, in store order.
    pub crop_index: usize,
}

impl CropProvenance {
    fn label(&self) -> String {
        format!("img{}/crop{}", self.source_image, self.crop_index)
    }

    fn parse(label: &str) -> Option<Self> {
        let (img, crop) = label.split_once('/')?;
        Some(Self {
            source_image: img.strip_prefix("img")?.parse().ok()?,
            crop_index: crop.strip_prefix("crop")?.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedRepresentations {
    pub z_id: EmbeddingMatrix,
    pub z_ood: EmbeddingMatrix,
    pub id_provenance: Vec<CropProvenance>,
    pub ood_provenance: Vec<CropProvenance>,
}

impl MinedRepresentations {
    pub fn dim(&self) -> usize {
        self.z_id.dim()
    }

    /// Both sides as `images` stores whose labels carry provenance.
    pub fn to_stores(&self) -> (EmbeddingStore, EmbeddingStore) {
        let mk = |m: &EmbeddingMatrix, p: &[CropProvenance]| {
            EmbeddingStore::untagged(
                StoreKind::Images,
                m.clone(),
                p.iter().map(CropProvenance::label).collect(),
            )
        };
        (mk(&self.z_id, &self.id_provenance), mk(&self.z_ood, &self.ood_provenance))
    }

    pub fn from_stores(id: &EmbeddingStore, ood: &EmbeddingStore) -> Result<Self, MiningError> {
        let parse = |s: &EmbeddingStore| -> Result<Vec<CropProvenance>, MiningError> {
            s.expect_kind(StoreKind::Images)?;
            s.labels
                .iter()
                .map(|l| {
                    CropProvenance::parse(l)
                        .ok_or_else(|| MiningError::BadProvenance(format!("label {l:?}")))
                })
                .collect()
        };
        if id.dim() != ood.dim() {
            return Err(VecError::DimMismatch { left: id.dim(), right: ood.dim() }.into());
        }
        Ok(Self {
            id_provenance: parse(id)?,
            ood_provenance: parse(ood)?,
            z_id: id.matrix.clone(),
            z_ood: ood.matrix.clone(),
        })
    }
}

/// Crop rows of every training image, in image order.
struct CropGroups {
    images: Vec<(u64, u32, Vec<usize>)>,
}

fn group_crops(store: &EmbeddingStore, cfg: &MiningConfig) -> Result<CropGroups, MiningError> {
    store.expect_kind(StoreKind::Crops)?;
    store.check_shape()?;
    let Tags::Crops(tags) = &store.tags else {
        unreachable!("check_shape guarantees crop tags");
    };
    let mut by_image: BTreeMap<u64, (u32, Vec<usize>)> = BTreeMap::new();
    for (row, t) in tags.iter().enumerate() {
        let e = by_image.entry(t.source_image).or_insert((t.source_class, Vec::new()));
        if e.0 != t.source_class {
            return Err(MiningError::BadProvenance(format!(
                "image {} mixes classes {} and {}",
                t.source_image, e.0, t.source_class
            )));
        }
        e.1.push(row);
    }
    let mut images = Vec::with_capacity(by_image.len());
    for (expected_id, (image, (class, rows))) in by_image.into_iter().enumerate() {
        if image != expected_id as u64 {
            return Err(MiningError::Grouping { image: expected_id as u64, crops: 0, expected: cfg.crops_per_image });
        }
        if rows.len() != cfg.crops_per_image {
            return Err(MiningError::Grouping { image, crops: rows.len(), expected: cfg.crops_per_image });
        }
        images.push((image, class, rows));
    }
    Ok(CropGroups { images })
}

pub fn mine_all(
    crop_store: &EmbeddingStore,
    id_prompts: &EmbeddingStore,
    cfg: &MiningConfig,
) -> Result<MinedRepresentations, MiningError> {
    mine_all_with(crop_store, id_prompts, cfg, Exec::default())
}

pub fn mine_all_with(
    crop_store: &EmbeddingStore,
    id_prompts: &EmbeddingStore,
    cfg: &MiningConfig,
    exec: Exec,
) -> Result<MinedRepresentations, MiningError> {
    cfg.validate()?;
    id_prompts.expect_kind(StoreKind::IdPrompts)?;
    if crop_store.dim() != id_prompts.dim() {
        return Err(VecError::DimMismatch { left: crop_store.dim(), right: id_prompts.dim() }.into());
    }
    let groups = group_crops(crop_store, cfg)?;
    let classes = id_prompts.count();
    for &(image, class, _) in &groups.images {
        if class as usize >= classes {
            return Err(MiningError::ClassIndexOutOfRange { image, class, classes });
        }
    }

    let per_image = exec.map_range(groups.images.len(), |g| {
        let (image, class, rows) = &groups.images[g];
        let prompt = id_prompts.matrix.row(*class as usize);
        let crops = crop_store.matrix.select(rows);
        let sims: Vec<f32> = crops.iter_rows().map(|c| dot(c, prompt)).collect();
        let id = select_id_reps(&sims, &crops, cfg.per_side)?;
        let ood = select_ood_reps(&sims, &crops, cfg.per_side)?;
        Ok::<_, MiningError>((*image, id, ood))
    });

    let dim = crop_store.dim();
    let mut out = MinedRepresentations {
        z_id: EmbeddingMatrix::empty(dim)?,
        z_ood: EmbeddingMatrix::empty(dim)?,
        id_provenance: Vec::new(),
        ood_provenance: Vec::new(),
    };
    for r in per_image {
        let (image, id, ood) = r?;
        out.z_id.extend(&id.reps)?;
        out.z_ood.extend(&ood.reps)?;
        let prov = |c: &usize| CropProvenance { source_image: image, crop_index: *c };
        out.id_provenance.extend(id.crop_indices.iter().map(prov));
        out.ood_provenance.extend(ood.crop_indices.iter().map(prov));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CropTag;

    fn crops3() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap()
    }

    #[test]
    fn argmax_and_argmin() {
        let sims = [0.9, 0.1, 0.5];
        assert_eq!(select_id_reps(&sims, &crops3(), 1).unwrap().crop_indices, vec![0]);
        assert_eq!(select_ood_reps(&sims, &crops3(), 1).unwrap().crop_indices, vec![1]);
    }

    #[test]
    fn l_equals_m_returns_everything_sorted() {
        let sims = [0.9, 0.1, 0.5];
        assert_eq!(select_id_reps(&sims, &crops3(), 3).unwrap().crop_indices, vec![0, 2, 1]);
        assert_eq!(select_ood_reps(&sims, &crops3(), 3).unwrap().crop_indices, vec![1, 2, 0]);
    }

    #[test]
    fn ties_break_by_crop_index() {
        let crops = EmbeddingMatrix::from_rows(1, &[[1.0f32]; 4]).unwrap();
        let sims = [0.2, 0.8, 0.8, 0.1];
        assert_eq!(select_id_reps(&sims, &crops, 2).unwrap().crop_indices, vec![1, 2]);
        let flat = [0.5; 4];
        assert_eq!(select_ood_reps(&flat, &crops, 2).unwrap().crop_indices, vec![0, 1]);
    }

    #[test]
    fn l_above_m_is_config_error() {
        assert!(matches!(select_id_reps(&[0.1, 0.2, 0.3], &crops3(), 4), Err(MiningError::Config(_))));
        assert!(MiningConfig::new(3, 2).is_err());
        assert!(MiningConfig::new(4, 2).is_ok());
    }

    fn crop_store(images: &[(u32, usize)], rows: &[[f32; 2]]) -> EmbeddingStore {
        let mut tags = Vec::new();
        for (img, &(class, n)) in images.iter().enumerate() {
            tags.extend((0..n).map(|_| CropTag { source_image: img as u64, source_class: class }));
        }
        EmbeddingStore {
            kind: StoreKind::Crops,
            matrix: EmbeddingMatrix::from_rows(2, rows).unwrap(),
            labels: (0..rows.len()).map(|i| format!("c{i}")).collect(),
            tags: Tags::Crops(tags),
        }
    }

    fn prompts() -> EmbeddingStore {
        let m = EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        EmbeddingStore::untagged(StoreKind::IdPrompts, m, vec!["a".into(), "b".into()])
    }

    #[test]
    fn mine_counts_rows() {
        let rows = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.0, 1.0], [1.0, 0.0], [0.8, 0.6]];
        let s = crop_store(&[(0, 3), (1, 3)], &rows[..6]);
        let cfg = MiningConfig::new(3, 1).unwrap();
        let mined = mine_all(&s, &prompts(), &cfg).unwrap();
        assert_eq!(mined.z_id.rows(), 2);
        assert_eq!(mined.z_ood.rows(), 2);
        // image 1 is class b = (0,1): best crop 0 (0,1), worst crop 1 (1,0)
        assert_eq!(mined.id_provenance[1], CropProvenance { source_image: 1, crop_index: 0 });
        assert_eq!(mined.ood_provenance[1], CropProvenance { source_image: 1, crop_index: 1 });
        assert_eq!(mined.z_id.row(0), &[1.0, 0.0]);
        assert_eq!(mined.z_ood.row(0), &[0.0, 1.0]);

        let (a, b) = mined.to_stores();
        assert_eq!(MinedRepresentations::from_stores(&a, &b).unwrap(), mined);
    }

    #[test]
    fn grouping_and_class_errors() {
        let rows = [[1.0, 0.0]; 5];
        let s = crop_store(&[(0, 3), (1, 2)], &rows);
        let cfg = MiningConfig::new(3, 1).unwrap();
        assert!(matches!(
            mine_all(&s, &prompts(), &cfg),
            Err(MiningError::Grouping { image: 1, crops: 2, expected: 3 })
        ));
        let s = crop_store(&[(5, 3)], &rows[..3]);
        assert!(matches!(
            mine_all(&s, &prompts(), &cfg),
            Err(MiningError::ClassIndexOutOfRange { class: 5, .. })
        ));
    }
}
