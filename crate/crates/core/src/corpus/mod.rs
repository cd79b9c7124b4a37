//! Embedding stores: the one container format shared by ID prompts,
//! vocabularies, training crops and test images.

mod format;
mod validate;
mod vocab;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vecops::{EmbeddingMatrix, VecError};

pub use format::{decode_store, encode_store, load_store, save_meta, save_store, LoadedStore};
pub use format::{HEADER_LEN, MAGIC, FORMAT_VERSION};
pub use validate::{validate_store, Issue, ValidationReport};
pub use vocab::{VocabEntry, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StoreKind {
    IdPrompts,
    Vocabulary,
    Crops,
    Images,
}

impl StoreKind {
    pub fn code(self) -> u8 {
        match self {
            StoreKind::IdPrompts => 0,
            StoreKind::Vocabulary => 1,
            StoreKind::Crops => 2,
            StoreKind::Images => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => StoreKind::IdPrompts,
            1 => StoreKind::Vocabulary,
            2 => StoreKind::Crops,
            3 => StoreKind::Images,
            _ => return None,
        })
    }

    /// Tag schema id every store of this kind carries.
    pub fn tag_schema(self) -> u8 {
        match self {
            StoreKind::Vocabulary => 1,
            StoreKind::Crops => 2,
            StoreKind::IdPrompts | StoreKind::Images => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartOfSpeech {
    Noun,
    Adjective,
}

impl PartOfSpeech {
    pub fn code(self) -> u8 {
        match self {
            PartOfSpeech::Noun => 0,
            PartOfSpeech::Adjective => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PartOfSpeech::Noun),
            1 => Some(PartOfSpeech::Adjective),
            _ => None,
        }
    }
}

/// Per-row vocabulary metadata. `prompt_row` links a bare-word row to the row
/// holding its templated-prompt embedding; prompt rows themselves have none.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabTag {
    pub pos: Option<PartOfSpeech>,
    pub prompt_row: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropTag {
    pub source_image: u64,
    pub source_class: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tags {
    None,
    Vocab(Vec<VocabTag>),
    Crops(Vec<CropTag>),
}

impl Tags {
    pub fn schema_id(&self) -> u8 {
        match self {
            Tags::None => 0,
            Tags::Vocab(_) => 1,
            Tags::Crops(_) => 2,
        }
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            Tags::None => None,
            Tags::Vocab(v) => Some(v.len()),
            Tags::Crops(v) => Some(v.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub kind: StoreKind,
    pub matrix: EmbeddingMatrix,
    pub labels: Vec<String>,
    pub tags: Tags,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, expected \"RAP1\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown store kind code {0}")]
    UnknownKind(u8),
    #[error("unknown tag schema id {0}")]
    UnknownTagSchema(u8),
    #[error("store kind {kind:?} requires tag schema {expected}, found {found}")]
    TagSchemaMismatch { kind: StoreKind, expected: u8, found: u8 },
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("header declares {expected} payload bytes but file carries {found}")]
    DimMismatch { expected: u64, found: u64 },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("row {0} contains a non-finite value")]
    NonFiniteValue(usize),
    #[error("label of row {0} is not valid UTF-8")]
    InvalidUtf8(usize),
    #[error("label of row {0} exceeds 65535 bytes")]
    LabelTooLong(usize),
    #[error("{what} has {found} entries but the store has {count} rows")]
    LengthMismatch { what: &'static str, found: usize, count: usize },
    #[error("row {0} has an unknown part-of-speech code")]
    BadTag(usize),
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("vocabulary row {0} has no part-of-speech tag")]
    MissingPosTag(usize),
    #[error("row {row} references row {index}, outside the store")]
    DanglingIndex { row: usize, index: u64 },
    #[error("expected a {expected:?} store, found {found:?}")]
    WrongKind { expected: StoreKind, found: StoreKind },
    #[error(transparent)]
    Vec(#[from] VecError),
}

impl EmbeddingStore {
    /// Store without per-row tags (id prompts or images).
    pub fn untagged(kind: StoreKind, matrix: EmbeddingMatrix, labels: Vec<String>) -> Self {
        Self { kind, matrix, labels, tags: Tags::None }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn expect_kind(&self, expected: StoreKind) -> Result<(), StoreError> {
        if self.kind != expected {
            return Err(StoreError::WrongKind { expected, found: self.kind });
        }
        Ok(())
    }

    /// Checks the structural invariants the file format relies on.
    pub fn check_shape(&self) -> Result<(), StoreError> {
        let count = self.count();
        if self.labels.len() != count {
            return Err(StoreError::LengthMismatch {
                what: "label table",
                found: self.labels.len(),
                count,
            });
        }
        if let Some(n) = self.tags.len() {
            if n != count {
                return Err(StoreError::LengthMismatch { what: "tag table", found: n, count });
            }
        }
        let expected = self.kind.tag_schema();
        if self.tags.schema_id() != expected {
            return Err(StoreError::TagSchemaMismatch {
                kind: self.kind,
                expected,
                found: self.tags.schema_id(),
            });
        }
        Ok(())
    }

    /// Builds a vocabulary store with a bare-word row followed by its
    /// templated-prompt row for every entry.
    pub fn vocabulary_from_pairs<I>(dim: usize, pairs: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = VocabPair>,
    {
        let mut matrix = EmbeddingMatrix::empty(dim)?;
        let mut labels = Vec::new();
        let mut tags = Vec::new();
        for p in pairs {
            let word_row = matrix.rows() as u64;
            matrix.push_row(&p.word_embedding)?;
            matrix.push_row(&p.prompt_embedding)?;
            labels.push(p.word);
            labels.push(p.prompt);
            tags.push(VocabTag { pos: Some(p.pos), prompt_row: Some(word_row + 1) });
            tags.push(VocabTag { pos: Some(p.pos), prompt_row: None });
        }
        Ok(Self { kind: StoreKind::Vocabulary, matrix, labels, tags: Tags::Vocab(tags) })
    }
}

/// One vocabulary word with both of its embeddings.
#[derive(Debug, Clone)]
pub struct VocabPair {
    pub word: String,
    pub pos: PartOfSpeech,
    pub word_embedding: Vec<f32>,
    pub prompt: String,
    pub prompt_embedding: Vec<f32>,
}

/// Case-folding used for every word comparison in the engine.
pub fn fold_word(s: &str) -> String {
    s.trim().to_lowercase()
}
