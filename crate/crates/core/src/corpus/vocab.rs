use std::collections::BTreeSet;

use super::{EmbeddingStore, PartOfSpeech, StoreError, StoreKind, Tags};
use crate::vecops::EmbeddingMatrix;

/// A retrievable word. Row indices point into the vocabulary store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub word: String,
    pub pos: PartOfSpeech,
    pub word_embedding_row: usize,
    pub prompt_embedding_row: usize,
}

/// Vocabulary split into aligned bare-word and templated-prompt matrices:
/// row `i` of both matrices belongs to `entries[i]`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    word_embs: EmbeddingMatrix,
    prompt_embs: EmbeddingMatrix,
}

impl Vocabulary {
    /// Word rows are the rows no other row points at; a word row without a
    /// `prompt_row` doubles as its own prompt.
    pub fn from_store(store: &EmbeddingStore) -> Result<Self, StoreError> {
        store.expect_kind(StoreKind::Vocabulary)?;
        store.check_shape()?;
        let Tags::Vocab(tags) = &store.tags else {
            return Err(StoreError::MissingPosTag(0));
        };
        let count = store.count() as u64;
        let mut prompt_rows = BTreeSet::new();
        for (row, t) in tags.iter().enumerate() {
            if let Some(p) = t.prompt_row {
                if p >= count || p == row as u64 {
                    return Err(StoreError::DanglingIndex { row, index: p });
                }
                prompt_rows.insert(p as usize);
            }
        }
        let mut entries = Vec::new();
        for (row, t) in tags.iter().enumerate() {
            if prompt_rows.contains(&row) {
                continue;
            }
            let pos = t.pos.ok_or(StoreError::MissingPosTag(row))?;
            entries.push(VocabEntry {
                word: store.labels[row].clone(),
                pos,
                word_embedding_row: row,
                prompt_embedding_row: t.prompt_row.map_or(row, |p| p as usize),
            });
        }
        let word_rows: Vec<usize> = entries.iter().map(|e| e.word_embedding_row).collect();
        let prompt_rows: Vec<usize> = entries.iter().map(|e| e.prompt_embedding_row).collect();
        Ok(Self {
            word_embs: store.matrix.select(&word_rows),
            prompt_embs: store.matrix.select(&prompt_rows),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.word_embs.dim()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn word_embeddings(&self) -> &EmbeddingMatrix {
        &self.word_embs
    }

    pub fn prompt_embeddings(&self) -> &EmbeddingMatrix {
        &self.prompt_embs
    }

    /// Templated-prompt embedding of entry `i`.
    pub fn prompt_embedding(&self, i: usize) -> &[f32] {
        self.prompt_embs.row(i)
    }
}
