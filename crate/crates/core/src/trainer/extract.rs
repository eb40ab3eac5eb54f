use std::io::BufRead;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::io::write_jsonl;
use crate::dataset::sampler::{appearance_inputs, evenly_spaced, gait_inputs};
use crate::dataset::{
    AugmentConfig, AugmentDecision, DatasetIndex, GaitMeta, IndexEntry, SkipRecord, Split, ALIGNED_SIZE,
    SILHOUETTE_WIDTH,
};
use crate::error::{config_err, Error, Result};
use crate::evaluator::{ItemMeta, RetrievalProblem};
use crate::model::SeqMasksModel;
use crate::trainer::config::ExtractConfig;

pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const SKIPPED_FILE: &str = "skipped.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gait: Option<GaitMeta>,
    /// Frames that went into the appearance average.
    pub frames: usize,
    pub embedding: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn item_meta(&self) -> ItemMeta {
        ItemMeta {
            identity: self.identity,
            camera: self.camera,
            gait: self.gait,
        }
    }
}

/// Descriptor of one whole sequence. Frames are read chunk by chunk.
pub fn embed_entry(
    model: &SeqMasksModel,
    entry: &IndexEntry,
    input: &AugmentConfig,
    cfg: &ExtractConfig,
) -> Result<(Vec<f32>, usize)> {
    let usable = entry.usable_frames();
    if usable.is_empty() {
        return Err(Error::Data(format!("sequence `{}` has no usable frames", entry.meta.key)));
    }
    let dev = Device::Cpu;
    let silhouettes = match model.gait {
        Some(_) => {
            let picked = evenly_spaced(&usable, cfg.max_silhouettes);
            let data = gait_inputs(entry, &picked)?;
            Some(Tensor::from_vec(data, (1, picked.len(), ALIGNED_SIZE, SILHOUETTE_WIDTH), &dev)?)
        }
        None => None,
    };
    let len = if model.appearance.is_some() { usable.len() } else { 0 };
    let out = model.embed_streaming(
        len,
        |start, n| {
            let idx = &usable[start..start + n];
            let (pixels, masks) = appearance_inputs(entry, idx, input, AugmentDecision::default())?;
            Ok((
                Tensor::from_vec(pixels, (n, 3, input.frame_height, input.frame_width), &dev)?,
                Tensor::from_vec(masks, (n, input.mask_height, input.mask_width), &dev)?,
            ))
        },
        silhouettes.as_ref(),
        cfg.chunk,
    )?;
    let v = out.descriptor().squeeze(0)?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
    Ok((v, len))
}

/// Embeds every sequence of `split` (all splits when `None`). Sequences that fail to load
/// are reported instead of aborting the run.
pub fn extract_features(
    model: &SeqMasksModel,
    index: &DatasetIndex,
    split: Option<Split>,
    input: &AugmentConfig,
    cfg: &ExtractConfig,
) -> Result<(Vec<EmbeddingRecord>, Vec<SkipRecord>)> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for entry in index.entries.iter().filter(|e| split.is_none_or(|s| e.meta.split == s)) {
        match embed_entry(model, entry, input, cfg) {
            Ok((embedding, frames)) => records.push(EmbeddingRecord {
                key: entry.meta.key.clone(),
                identity: entry.meta.identity,
                camera: entry.meta.camera,
                split: entry.meta.split,
                gait: entry.meta.gait,
                frames,
                embedding,
            }),
            Err(e @ (Error::Shape(_) | Error::Tensor(_) | Error::NonFiniteLoss { .. })) => return Err(e),
            Err(e) => {
                log::warn!("skipping `{}`: {e}", entry.meta.key);
                skipped.push(SkipRecord {
                    key: entry.meta.key.clone(),
                    identity: Some(entry.meta.identity),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok((records, skipped))
}

pub fn write_embeddings(dir: &Path, records: &[EmbeddingRecord], skipped: &[SkipRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(EMBEDDINGS_FILE), records)?;
    write_jsonl(&dir.join(SKIPPED_FILE), skipped)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Query and gallery sets from embedding records. When `train_only` is set every train
/// record serves as both query and gallery; self-matches share identity and camera and
/// are excluded by the protocol.
pub fn retrieval_problem(records: &[EmbeddingRecord], train_only: bool) -> Result<RetrievalProblem> {
    let mut p = RetrievalProblem::default();
    for r in records {
        let (is_query, is_gallery) = if train_only {
            (r.split == Split::Train, r.split == Split::Train)
        } else {
            (r.split == Split::Query, r.split == Split::Gallery)
        };
        if is_query {
            p.query_emb.push(r.embedding.clone());
            p.query_meta.push(r.item_meta());
        }
        if is_gallery {
            p.gallery_emb.push(r.embedding.clone());
            p.gallery_meta.push(r.item_meta());
        }
    }
    if p.query_emb.is_empty() || p.gallery_emb.is_empty() {
        return Err(config_err!(
            "evaluation needs query and gallery sequences, found {} and {}",
            p.query_emb.len(),
            p.gallery_emb.len()
        ));
    }
    p.validate()?;
    Ok(p)
}
