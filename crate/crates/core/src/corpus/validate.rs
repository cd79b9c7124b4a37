use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{fold_word, EmbeddingStore, StoreKind, Tags};
use crate::vecops::UNIT_TOLERANCE;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum Issue {
    LabelCount { labels: usize, rows: usize },
    TagCount { tags: usize, rows: usize },
    TagSchema { expected: u8, found: u8 },
    NonFinite { row: usize },
    NormDeviation { row: usize, norm: f64 },
    /// Same case-folded word and part of speech on more than one word row.
    DuplicateWord { word: String, rows: Vec<usize> },
    MissingPosTag { row: usize },
    DanglingIndex { row: usize, index: u64 },
    /// Source image indices must cover `0..N` without gaps.
    MissingImage { image: u64 },
    UnevenCropGroups { image: u64, crops: usize, expected: usize },
    InconsistentCropClass { image: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Reports every problem found; never fails.
pub fn validate_store(s: &EmbeddingStore) -> ValidationReport {
    let mut issues = Vec::new();
    let rows = s.count();
    if s.labels.len() != rows {
        issues.push(Issue::LabelCount { labels: s.labels.len(), rows });
    }
    if let Some(n) = s.tags.len() {
        if n != rows {
            issues.push(Issue::TagCount { tags: n, rows });
        }
    }
    let expected = s.kind.tag_schema();
    if s.tags.schema_id() != expected {
        issues.push(Issue::TagSchema { expected, found: s.tags.schema_id() });
        if s.kind == StoreKind::Vocabulary {
            issues.extend((0..rows).map(|row| Issue::MissingPosTag { row }));
        }
    }
    for i in 0..rows {
        let r = s.matrix.row(i);
        if r.iter().any(|v| !v.is_finite()) {
            issues.push(Issue::NonFinite { row: i });
            continue;
        }
        let n = s.matrix.row_norm(i);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            issues.push(Issue::NormDeviation { row: i, norm: n });
        }
    }
    match &s.tags {
        Tags::Vocab(tags) => check_vocab(s, tags, &mut issues),
        Tags::Crops(tags) => check_crops(tags, &mut issues),
        Tags::None => {}
    }
    ValidationReport { issues }
}

fn check_vocab(s: &EmbeddingStore, tags: &[super::VocabTag], issues: &mut Vec<Issue>) {
    let rows = s.count() as u64;
    let mut prompt_rows = BTreeSet::new();
    for (i, t) in tags.iter().enumerate() {
        if t.pos.is_none() {
            issues.push(Issue::MissingPosTag { row: i });
        }
        if let Some(p) = t.prompt_row {
            if p >= rows || p == i as u64 {
                issues.push(Issue::DanglingIndex { row: i, index: p });
            } else {
                prompt_rows.insert(p as usize);
            }
        }
    }
    let mut seen: BTreeMap<(String, Option<u8>), Vec<usize>> = BTreeMap::new();
    for (i, t) in tags.iter().enumerate() {
        if prompt_rows.contains(&i) {
            continue;
        }
        if let Some(label) = s.labels.get(i) {
            let key = (fold_word(label), t.pos.map(|p| p.code()));
            seen.entry(key).or_default().push(i);
        }
    }
    for ((word, _), rows) in seen {
        if rows.len() > 1 {
            issues.push(Issue::DuplicateWord { word, rows });
        }
    }
}

fn check_crops(tags: &[super::CropTag], issues: &mut Vec<Issue>) {
    let mut per_image: BTreeMap<u64, (usize, BTreeSet<u32>)> = BTreeMap::new();
    for t in tags {
        let e = per_image.entry(t.source_image).or_default();
        e.0 += 1;
        e.1.insert(t.source_class);
    }
    let Some(&max_image) = per_image.keys().next_back() else {
        return;
    };
    for image in 0..=max_image {
        if !per_image.contains_key(&image) {
            issues.push(Issue::MissingImage { image });
        }
    }
    let expected = per_image.values().next().map(|v| v.0).unwrap_or(0);
    for (&image, (crops, classes)) in &per_image {
        if *crops != expected {
            issues.push(Issue::UnevenCropGroups { image, crops: *crops, expected });
        }
        if classes.len() > 1 {
            issues.push(Issue::InconsistentCropClass { image });
        }
    }
}
