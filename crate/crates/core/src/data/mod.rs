//! Raw CSV ingestion, vocabularies, splits and mini-batches.

mod dataset;
mod prepare;
mod schema;
mod vocab;

use std::path::PathBuf;

use thiserror::Error;

pub use dataset::{Batch, Batches, EncodedDataset, SplitSpec};
pub use prepare::{prepare, Manifest, PrepareInput, PreparedDataset, SplitMode};
pub use schema::{
    discretize_numeric, expand_timestamp, DatasetSchema, FieldKind, FieldSchema, FieldSpec, ResolvedSchema, TimePart,
    TimestampParts,
};
pub use vocab::{Vocabulary, VocabularySet, OOV_INDEX};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Config(String),
    #[error("column `{0}` not found in the CSV header")]
    MissingColumn(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        DataError::Csv {
            path: path.into(),
            source,
        }
    }
}
