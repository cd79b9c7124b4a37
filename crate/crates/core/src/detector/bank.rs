use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::DetectError;
use crate::corpus::{decode_store, encode_store, EmbeddingStore, PartOfSpeech, StoreKind, Tags, VocabTag};
use crate::retrieval::template;
use crate::vecops::{EmbeddingMatrix, VecError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OodPrompt {
    pub word: String,
    pub pos: PartOfSpeech,
    pub origin: PromptOrigin,
}

impl OodPrompt {
    pub fn text(&self) -> String {
        template(&self.word, self.pos)
    }
}

/// ID prompts plus OOD prompts split into ensemble groups.
///
/// OOD embeddings live in one matrix; `groups` holds row indices into it.
/// Mutation is crate-private and only the adaptation state performs it, so a
/// `&PromptBank` handed to scorers is a frozen snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    id_labels: Vec<String>,
    id_prompts: EmbeddingMatrix,
    ood_prompts: EmbeddingMatrix,
    ood_meta: Vec<OodPrompt>,
    groups: Vec<Vec<usize>>,
    version: u64,
}

/// Seeded shuffle of `entries`, dealt round-robin into `n_groups` groups.
/// With fewer entries than groups, the trailing groups stay empty.
pub fn partition_groups<T: Clone>(entries: &[T], n_groups: usize, seed: u64) -> Vec<Vec<T>> {
    let n_groups = n_groups.max(1);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut groups = vec![Vec::with_capacity(entries.len() / n_groups + 1); n_groups];
    for (i, &e) in order.iter().enumerate() {
        groups[i % n_groups].push(entries[e].clone());
    }
    groups
}

impl PromptBank {
    pub fn new(
        id_labels: Vec<String>,
        id_prompts: EmbeddingMatrix,
        ood_prompts: EmbeddingMatrix,
        ood_meta: Vec<OodPrompt>,
        n_groups: usize,
        seed: u64,
    ) -> Result<Self, DetectError> {
        if n_groups == 0 {
            return Err(DetectError::Config("n_groups must be at least 1".into()));
        }
        let idx: Vec<usize> = (0..ood_prompts.rows()).collect();
        let mut groups = partition_groups(&idx, n_groups, seed);
        groups.iter_mut().for_each(|g| g.sort_unstable());
        Self::from_parts(id_labels, id_prompts, ood_prompts, ood_meta, groups, 0)
    }

    pub fn from_parts(
        id_labels: Vec<String>,
        id_prompts: EmbeddingMatrix,
        ood_prompts: EmbeddingMatrix,
        ood_meta: Vec<OodPrompt>,
        groups: Vec<Vec<usize>>,
        version: u64,
    ) -> Result<Self, DetectError> {
        let bank = Self { id_labels, id_prompts, ood_prompts, ood_meta, groups, version };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: String| Err(DetectError::InvalidBank(m));
        if self.id_prompts.is_empty() {
            return bad("no ID prompts".into());
        }
        if self.id_labels.len() != self.id_prompts.rows() {
            return bad(format!("{} ID labels for {} ID prompts", self.id_labels.len(), self.id_prompts.rows()));
        }
        if self.id_prompts.dim() != self.ood_prompts.dim() {
            return Err(VecError::DimMismatch { left: self.id_prompts.dim(), right: self.ood_prompts.dim() }.into());
        }
        if self.ood_meta.len() != self.ood_prompts.rows() {
            return bad(format!("{} OOD labels for {} OOD prompts", self.ood_meta.len(), self.ood_prompts.rows()));
        }
        if self.groups.is_empty() {
            return bad("no ensemble groups".into());
        }
        let mut seen = vec![false; self.ood_prompts.rows()];
        for g in &self.groups {
            for &i in g {
                if i >= seen.len() || seen[i] {
                    return bad(format!("OOD prompt index {i} missing or assigned twice"));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("an OOD prompt belongs to no group".into());
        }
        let sizes = self.group_sizes();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        if hi - lo > 1 {
            return bad(format!("group sizes range from {lo} to {hi}"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.id_prompts.dim()
    }

    pub fn id_labels(&self) -> &[String] {
        &self.id_labels
    }

    pub fn id_prompts(&self) -> &EmbeddingMatrix {
        &self.id_prompts
    }

    pub fn ood_prompts(&self) -> &EmbeddingMatrix {
        &self.ood_prompts
    }

    pub fn ood_meta(&self) -> &[OodPrompt] {
        &self.ood_meta
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// OOD prompt embeddings of group `j` as a standalone matrix.
    pub fn group_embeddings(&self, j: usize) -> EmbeddingMatrix {
        self.ood_prompts.select(&self.groups[j])
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn total_ood(&self) -> usize {
        self.ood_meta.len()
    }

    pub fn count_origin(&self, origin: PromptOrigin) -> usize {
        self.ood_meta.iter().filter(|m| m.origin == origin).count()
    }

    /// Appends one prompt to the currently smallest group (lowest index on
    /// ties) and returns that group.
    pub(crate) fn append_ood(&mut self, meta: OodPrompt, embedding: &[f32]) -> Result<usize, DetectError> {
        self.ood_prompts.push_row(embedding)?;
        self.ood_meta.push(meta);
        let idx = self.ood_prompts.rows() - 1;
        let g = (0..self.groups.len()).min_by_key(|&j| (self.groups[j].len(), j)).unwrap();
        self.groups[g].push(idx);
        Ok(g)
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Same prompts regrouped into `n_groups` with a fresh seeded partition.
    pub fn regrouped(&self, n_groups: usize, seed: u64) -> Result<Self, DetectError> {
        let mut b = Self::new(
            self.id_labels.clone(),
            self.id_prompts.clone(),
            self.ood_prompts.clone(),
            self.ood_meta.clone(),
            n_groups,
            seed,
        )?;
        b.version = self.version;
        Ok(b)
    }
}

pub const BANK_MAGIC: &[u8; 4] = b"RAPB";
const BANK_VERSION: u8 = 1;

/// Bank layout (little-endian):
///
/// ```text
/// "RAPB", u8 version, 3 reserved zero bytes
/// u64 bank version, u32 n_groups
/// u64 len, RAP1 id_prompts store (labels = class names)
/// u64 len, RAP1 vocabulary store of OOD prompt embeddings (labels = words)
/// C × (u32 group, u8 origin: 0 train, 1 test)
/// u32 len, UTF-8 JSON metadata
/// ```
pub fn save_bank(bank: &PromptBank, path: &Path, meta: &serde_json::Value) -> Result<(), DetectError> {
    let bytes = encode_bank(bank, meta)?;
    std::fs::write(path, bytes).map_err(|source| DetectError::Io { path: path.to_path_buf(), source })
}

pub fn encode_bank(bank: &PromptBank, meta: &serde_json::Value) -> Result<Vec<u8>, DetectError> {
    let id_store = EmbeddingStore::untagged(StoreKind::IdPrompts, bank.id_prompts.clone(), bank.id_labels.clone());
    let ood_store = EmbeddingStore {
        kind: StoreKind::Vocabulary,
        matrix: bank.ood_prompts.clone(),
        labels: bank.ood_meta.iter().map(|m| m.word.clone()).collect(),
        tags: Tags::Vocab(bank.ood_meta.iter().map(|m| VocabTag { pos: Some(m.pos), prompt_row: None }).collect()),
    };
    let id_bytes = encode_store(&id_store)?;
    let ood_bytes = encode_store(&ood_store)?;
    let mut group_of = vec![0u32; bank.total_ood()];
    for (g, members) in bank.groups.iter().enumerate() {
        for &i in members {
            group_of[i] = g as u32;
        }
    }
    let meta_text = serde_json::to_string(meta).expect("json values always serialize");

    let mut out = Vec::with_capacity(32 + id_bytes.len() + ood_bytes.len() + 5 * group_of.len() + meta_text.len());
    out.extend_from_slice(BANK_MAGIC);
    out.push(BANK_VERSION);
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&bank.version.to_le_bytes());
    out.extend_from_slice(&(bank.groups.len() as u32).to_le_bytes());
    out.extend_from_slice(&(id_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&id_bytes);
    out.extend_from_slice(&(ood_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&ood_bytes);
    for (i, g) in group_of.iter().enumerate() {
        out.extend_from_slice(&g.to_le_bytes());
        out.push(match bank.ood_meta[i].origin {
            PromptOrigin::Train => 0,
            PromptOrigin::Test => 1,
        });
    }
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LoadedBank {
    pub bank: PromptBank,
    pub meta: serde_json::Value,
}

pub fn load_bank(path: &Path) -> Result<LoadedBank, DetectError> {
    let bytes = std::fs::read(path).map_err(|source| DetectError::Io { path: path.to_path_buf(), source })?;
    decode_bank(&bytes)
}

pub fn decode_bank(bytes: &[u8]) -> Result<LoadedBank, DetectError> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &'static str| -> Result<&[u8], DetectError> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(DetectError::Truncated(what))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4, "header").map_err(|_| DetectError::BadMagic)? != BANK_MAGIC {
        return Err(DetectError::BadMagic);
    }
    let v = take(4, "header")?[0];
    if v != BANK_VERSION {
        return Err(DetectError::UnsupportedVersion(v));
    }
    let version = u64::from_le_bytes(take(8, "header")?.try_into().unwrap());
    let n_groups = u32::from_le_bytes(take(4, "header")?.try_into().unwrap()) as usize;
    let id_len = u64::from_le_bytes(take(8, "id prompts")?.try_into().unwrap()) as usize;
    let id_store = decode_store(take(id_len, "id prompts")?)?;
    let ood_len = u64::from_le_bytes(take(8, "ood prompts")?.try_into().unwrap()) as usize;
    let ood_store = decode_store(take(ood_len, "ood prompts")?)?;
    id_store.expect_kind(StoreKind::IdPrompts)?;
    ood_store.expect_kind(StoreKind::Vocabulary)?;
    let Tags::Vocab(tags) = &ood_store.tags else {
        return Err(DetectError::InvalidBank("OOD store lacks vocabulary tags".into()));
    };
    if n_groups == 0 {
        return Err(DetectError::InvalidBank("zero groups".into()));
    }
    let mut groups = vec![Vec::new(); n_groups];
    let mut meta_list = Vec::with_capacity(ood_store.count());
    for i in 0..ood_store.count() {
        let rec = take(5, "group table")?;
        let g = u32::from_le_bytes(rec[..4].try_into().unwrap()) as usize;
        if g >= n_groups {
            return Err(DetectError::InvalidBank(format!("prompt {i} assigned to group {g}")));
        }
        groups[g].push(i);
        let origin = match rec[4] {
            0 => PromptOrigin::Train,
            1 => PromptOrigin::Test,
            o => return Err(DetectError::InvalidBank(format!("unknown origin code {o}"))),
        };
        let pos = tags[i].pos.ok_or_else(|| DetectError::InvalidBank(format!("prompt {i} lacks a part of speech")))?;
        meta_list.push(OodPrompt { word: ood_store.labels[i].clone(), pos, origin });
    }
    let meta_len = u32::from_le_bytes(take(4, "metadata")?.try_into().unwrap()) as usize;
    let meta_raw = take(meta_len, "metadata")?;
    if pos != bytes.len() {
        return Err(DetectError::InvalidBank("trailing bytes after metadata".into()));
    }
    let meta = serde_json::from_slice(meta_raw)
        .map_err(|e| DetectError::InvalidBank(format!("metadata is not JSON: {e}")))?;
    let bank = PromptBank::from_parts(id_store.labels, id_store.matrix, ood_store.matrix, meta_list, groups, version)?;
    Ok(LoadedBank { bank, meta })
}
