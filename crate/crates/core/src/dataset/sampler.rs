use candle_core::{Device, Tensor};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::augment::{augment_pair_with, normalize_frames, AugmentConfig, AugmentDecision};
use crate::dataset::mask::gait_silhouette;
use crate::dataset::{DatasetIndex, IndexEntry, ALIGNED_SIZE, SILHOUETTE_WIDTH};
use crate::error::{config_err, invalid, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Identities per batch.
    pub p: usize,
    /// Sequences per identity.
    pub kseq: usize,
    /// Appearance frames per sequence.
    pub t: usize,
    /// Gait silhouettes per sequence.
    pub k: usize,
    /// Reuse the appearance frames' masks for the gait set (forces k == t).
    pub shared_frames: bool,
    /// Apply random crop/flip (training); off gives the deterministic resize path.
    pub augment: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            p: 8,
            kseq: 4,
            t: 8,
            k: 8,
            shared_frames: false,
            augment: true,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.kseq == 0 || self.t == 0 || self.k == 0 {
            return Err(config_err!("batch shape (P, Kseq, T, K) entries must be positive"));
        }
        if self.shared_frames && self.k != self.t {
            return Err(config_err!("shared_frames requires K == T, got K={} T={}", self.k, self.t));
        }
        Ok(())
    }
}

/// P identities × Kseq sequences, ready for the model.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// (N, T, 3, H, W), normalized.
    pub appearance_frames: Tensor,
    /// (N, T, h, w) soft masks at backbone resolution.
    pub appearance_masks: Tensor,
    /// (N, K, 64, 44) aligned silhouettes.
    pub gait_masks: Tensor,
    /// Identity per row.
    pub labels: Vec<u32>,
    /// Sequence key per row, for diagnostics.
    pub keys: Vec<String>,
    pub shape: (usize, usize, usize, usize),
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `n` items, without replacement when enough are available, with replacement otherwise.
fn draw_indices<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(invalid!("no frames to sample from"));
    }
    let mut out: Vec<usize> = if pool.len() >= n {
        pool.choose_multiple(rng, n).copied().collect()
    } else {
        let mut v = pool.to_vec();
        while v.len() < n {
            v.push(*pool.choose(rng).unwrap());
        }
        v
    };
    out.sort_unstable();
    Ok(out)
}

/// Frames and soft masks for one sequence at the given frame indices.
pub fn appearance_inputs(
    entry: &IndexEntry,
    indices: &[usize],
    aug: &AugmentConfig,
    decision: AugmentDecision,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let frames = indices.iter().map(|&i| entry.load_frame(i)).collect::<Result<Vec<_>>>()?;
    let masks = indices.iter().map(|&i| entry.load_mask(i)).collect::<Result<Vec<_>>>()?;
    let out = augment_pair_with(&frames, &masks, aug, decision)?;
    let pixels = normalize_frames(&out.frames);
    let coarse = out.masks.into_iter().flat_map(|m| m.data).collect();
    Ok((pixels, coarse))
}

/// Aligned 64×44 silhouettes for the given frame indices; frames without foreground are
/// replaced by the first usable one.
pub fn gait_inputs(entry: &IndexEntry, indices: &[usize]) -> Result<Vec<f32>> {
    let mut grids = Vec::with_capacity(indices.len());
    let mut failed = Vec::new();
    for &i in indices {
        match gait_silhouette(&entry.load_mask(i)?) {
            Ok(g) => grids.push(Some(g)),
            Err(_) => {
                failed.push(i);
                grids.push(None)
            }
        }
    }
    let fallback = grids
        .iter()
        .flatten()
        .next()
        .cloned()
        .ok_or_else(|| invalid!("sequence `{}` has no foreground in the sampled masks", entry.meta.key))?;
    if !failed.is_empty() {
        log::warn!("sequence `{}`: empty masks at {failed:?} replaced in gait set", entry.meta.key);
    }
    Ok(grids
        .into_iter()
        .flat_map(|g| g.unwrap_or_else(|| fallback.clone()).data)
        .collect())
}

/// Evenly spaced subset of at most `max` items from `pool`.
pub fn evenly_spaced(pool: &[usize], max: usize) -> Vec<usize> {
    if pool.len() <= max {
        return pool.to_vec();
    }
    (0..max).map(|i| pool[i * pool.len() / max]).collect()
}

pub fn pk_sample<R: Rng + ?Sized>(
    index: &DatasetIndex,
    cfg: &SampleConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<TrainBatch> {
    cfg.validate()?;
    aug.validate()?;
    let groups = index.train_groups();
    if groups.len() < cfg.p {
        return Err(config_err!(
            "batch needs P={} identities but the train split has {}",
            cfg.p,
            groups.len()
        ));
    }
    let ids: Vec<u32> = groups.keys().copied().collect();
    let chosen: Vec<u32> = ids.choose_multiple(rng, cfg.p).copied().collect();

    let n = cfg.p * cfg.kseq;
    let mut pixels = Vec::new();
    let mut coarse = Vec::new();
    let mut gait = Vec::new();
    let mut labels = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    for id in chosen {
        let seqs = draw_indices(&groups[&id], cfg.kseq, rng)?;
        for s in seqs {
            let entry = &index.entries[s];
            let usable = entry.usable_frames();
            let frames = draw_indices(&usable, cfg.t, rng)?;
            let silhouettes = if cfg.shared_frames {
                frames.clone()
            } else {
                draw_indices(&usable, cfg.k, rng)?
            };
            let decision = if cfg.augment {
                AugmentDecision::draw(aug, rng)
            } else {
                AugmentDecision::default()
            };
            let (p, c) = appearance_inputs(entry, &frames, aug, decision)?;
            pixels.extend(p);
            coarse.extend(c);
            gait.extend(gait_inputs(entry, &silhouettes)?);
            labels.push(id);
            keys.push(entry.meta.key.clone());
        }
    }
    let dev = Device::Cpu;
    Ok(TrainBatch {
        appearance_frames: Tensor::from_vec(pixels, (n, cfg.t, 3, aug.frame_height, aug.frame_width), &dev)?,
        appearance_masks: Tensor::from_vec(coarse, (n, cfg.t, aug.mask_height, aug.mask_width), &dev)?,
        gait_masks: Tensor::from_vec(gait, (n, cfg.k, ALIGNED_SIZE, SILHOUETTE_WIDTH), &dev)?,
        labels,
        keys,
        shape: (cfg.p, cfg.kseq, cfg.t, cfg.k),
    })
}
