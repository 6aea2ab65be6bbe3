//! CSI ingestion, preprocessing, corpus I/O, split protocols and the
//! synthetic corpus generator.

mod corpus;
mod csi;
mod ingest;
mod pose;
mod split;
mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use corpus::{
    decode_sample, encode_sample, load_mmfi, read_manifest, write_corpus, CsiSample, DatasetIndex, IndexEntry,
    Manifest, PoseUnits, SynthMap, MANIFEST_FILE, SAMPLE_MAGIC, SAMPLE_VERSION,
};
pub use csi::{
    fit_linear_phase, normalize_sample, preprocess_window, unwrap_phase, CalibratedWindow, PhaseFit, RawCsiFrame,
};
pub use ingest::{ingest_canonical, ingest_raw, RAW_FORMAT};
pub use pose::{Pose, BOT_TORSO, JOINT_NAMES, NECK_BASE};
pub use split::{make_split, s2_test_subject_count, SplitSpec, SplitStrategy};
pub use synth::{generate as generate_synthetic, synth_dataset, SynthConfig, REST_POSE_MM};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing manifest {0}")]
    MissingManifest(PathBuf),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid config: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
