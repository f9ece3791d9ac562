//! Synthetic dataset generation: random monophonic pieces are rendered to
//! staff images and synthesized to audio; each note onset with enough
//! context becomes one (image, excerpt, x) training example.

mod bucket;
mod sampler;
mod store;

pub use bucket::BucketGrid;
pub use sampler::{sample_piece, SamplerConfig};
pub use store::{
    build_dataset, dataset_fingerprint, load_split, DatasetConfig, DatasetMeta, DatasetSummary,
    LoadedSplit, ManifestRecord, Split,
};

use serde::{Deserialize, Serialize};

use crate::score::NoteEvent;

/// A single staff's worth of symbolic music.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Piece {
    pub id: String,
    pub notes: Vec<NoteEvent>,
    /// Seconds per quarter note.
    pub tempo: f64,
}
