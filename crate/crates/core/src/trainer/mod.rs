//! Training loop, checkpoints and feature extraction.

pub mod checkpoint;
pub mod config;
pub mod extract;
pub mod train;

pub use checkpoint::{load_model, read_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::{DataConfig, DataFormat, ExtractConfig, FinetuneConfig, OptimizerConfig, Regime, TrainConfig};
pub use extract::{extract_features, read_embeddings, retrieval_problem, EmbeddingRecord};
pub use train::{run, TrainOutcome, Trainer};

use crate::dataset::casia::parse_casia_b;
use crate::dataset::mars::parse_mask_mars;
use crate::dataset::{filter_corpus, DatasetIndex, SkipRecord};
use crate::error::Result;

/// Reads and filters the corpus named by `data`.
pub fn load_index(data: &DataConfig) -> Result<(DatasetIndex, Vec<SkipRecord>)> {
    let (raw, mut skipped) = match data.format {
        DataFormat::Mars => (parse_mask_mars(&data.root)?, Vec::new()),
        DataFormat::Casia => {
            let out = parse_casia_b(&data.root, data.frames_root.as_deref())?;
            (out.index, out.skipped)
        }
    };
    let filtered = filter_corpus(&raw, data.min_frames, data.min_fg_ratio)?;
    skipped.extend(filtered.skipped);
    skipped.extend(filtered.dropped);
    Ok((filtered.index, skipped))
}
