//! Utterance manifests, frame loading, label broadcast, windowing, batching
//! and the synthetic corpus generator.

mod batch;
mod frames;
mod manifest;
mod synth;

pub use batch::{make_batches, make_sequences, BatchMode, Dataset, SequenceBatch, Window};
pub use frames::{denormalize, normalize_frame, resize_bilinear, FRAME_ENTRY, RAW_FRAMES_FILE};
pub use manifest::{load_manifest, parse_manifest, write_manifest, ManifestRow, MANIFEST_HEADER};
pub use synth::{decode_labels, synth_corpus, SynthConfig, SynthFormat};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{ContainerError, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest row {row}: {detail}")]
    Row { row: usize, detail: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {detail}")]
    Frames { path: PathBuf, detail: String },
    #[error("pixel value {0} outside [0, 255]")]
    PixelRange(f64),
    #[error("need at least {needed} sequences for a training batch, have {have}")]
    TooFewSequences { needed: usize, have: usize },
    #[error("batch size {0} below 2")]
    BatchSize(usize),
    #[error("sequence length must be positive")]
    SequenceLength,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Where an utterance's frames live.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrameSource {
    /// Image files in temporal order.
    Images(Vec<PathBuf>),
    /// A container holding one `[T, H, W, C]` entry.
    Raw(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: FrameSource,
    pub frame_count: usize,
    pub valence: f64,
    pub arousal: f64,
}

impl Utterance {
    pub fn labels(&self) -> [f64; 2] {
        [self.valence, self.arousal]
    }
}

/// One `(valence, arousal)` copy per frame.
pub fn broadcast_labels(u: &Utterance) -> Vec<[f64; 2]> {
    vec![u.labels(); u.frame_count]
}
