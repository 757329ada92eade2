//! On-disk formats and synthetic data: MVF1 volume files, study manifests,
//! and the phantom generator that stands in for clinical cohorts.

mod cohort;
mod manifest;
mod mvf;
mod phantom;

use std::path::PathBuf;

use thiserror::Error;

use crate::preprocess::PreprocessError;

pub use cohort::{generate_cohort, CohortSpec, MANIFEST_NAME};
pub use manifest::{load_manifest, parse_manifest, write_manifest, ManifestRecord};
pub use mvf::{
    decode, encode_labels, encode_volume, read_body_mask, read_labels, read_volume, write_body_mask, write_labels,
    write_volume, MvfContent, MVF_MAGIC,
};
pub use phantom::{
    generate_phantom, render_phantom, Blob, Phantom, PhantomGeometry, PhantomParams, Range, Tissue, VisitJitter,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not an MVF1 file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("truncated MVF1 file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unknown MVF1 dtype code {0}")]
    UnknownDtype(u8),
    #[error("expected {expected} file, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("phantom geometry rejected: {0}")]
    Geometry(String),
    #[error(transparent)]
    Volume(#[from] PreprocessError),
}

impl IoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;
