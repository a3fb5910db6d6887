//! Tabular data: manifests and CSV ingestion, leakage-free preprocessing,
//! label-and-group stratified splits, and a synthetic generator with a known
//! group-dependent labelling mechanism.

mod manifest;
mod preprocess;
mod split;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use manifest::{
    load_csv, ColumnData, DatasetManifest, LoadReport, RawColumn, RawTable, RowFilter, ValueSet,
    DATA_DIR_ENV,
};
pub use preprocess::{preprocess, ColumnStats, Dataset, PreprocessStats};
pub use split::{kfold, minibatches, stratified_split, Fold, SplitIndices, Strata, DEFAULT_SPLIT};
pub use synth::{synth_biased, synth_biased_with, SynthSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` named in the manifest is missing from the data")]
    MissingColumn(String),
    #[error("unparseable rows at lines {lines:?}: {reason}")]
    BadRows { lines: Vec<usize>, reason: String },
    #[error("feature schema mismatch on column `{column}`: {reason}")]
    SchemaMismatch { column: String, reason: String },
    #[error("cell (y={y}, a={g}) has {size} instances, need at least {needed}")]
    CellTooSmall {
        y: u8,
        g: u8,
        size: usize,
        needed: usize,
    },
    #[error("invalid split request: {0}")]
    InvalidSplit(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no usable rows")]
    Empty,
}

/// Per-(label, group) cell counts, indexed `[y][g]`.
pub type CellCounts = [[usize; 2]; 2];

pub fn cell_counts(labels: &[u8], groups: &[u8], indices: &[usize]) -> CellCounts {
    let mut c = [[0usize; 2]; 2];
    for &i in indices {
        c[labels[i] as usize][groups[i] as usize] += 1;
    }
    c
}
