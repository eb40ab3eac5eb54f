//! Corpus ingestion, Mask-MARS construction rules, silhouette alignment, augmentation and
//! identity-balanced batch sampling.

pub mod augment;
pub mod casia;
pub mod filter;
pub mod io;
pub mod mars;
pub mod mask;
pub mod sampler;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use augment::{augment_pair, augment_pair_with, normalize_frames, AugmentConfig, AugmentDecision};
pub use filter::{filter_corpus, SkipRecord};
pub use mask::{align_silhouette, crop_silhouette, foreground_ratio, is_effective};
pub use sampler::{pk_sample, SampleConfig, TrainBatch};

/// Side length of the aligned square silhouette.
pub const ALIGNED_SIZE: usize = 64;
/// Columns removed from each side of the aligned silhouette.
pub const SILHOUETTE_MARGIN: usize = 10;
/// Width of the gait network input.
pub const SILHOUETTE_WIDTH: usize = ALIGNED_SIZE - 2 * SILHOUETTE_MARGIN;

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RawMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("mask must be at least 1x1, got {height}x{width}"));
        }
        if pixels.len() != height * width {
            return Err(invalid!(
                "mask {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        if let Some(bad) = pixels.iter().find(|&&p| p > 1) {
            return Err(invalid!("mask pixels must be 0 or 1, found {bad}"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let pixels = (0..height * width)
            .map(|i| f(i / width, i % width) as u8)
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self> {
        Self::new(height, width, vec![value as u8; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.pixels.iter().map(|&p| p as f32).collect(),
        }
    }
}

/// Real-valued 2-D grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid!("grid {height}x{width} needs {} values", height * width));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Mass-weighted mean column index (pixel `x` sits at coordinate `x`).
    pub fn column_mass_center(&self) -> Option<f64> {
        let mut mass = 0.0f64;
        let mut moment = 0.0f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x) as f64;
                mass += v;
                moment += v * x as f64;
            }
        }
        (mass > 0.0).then(|| moment / mass)
    }
}

/// 8-bit RGB image stored planar (3 × H × W).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbFrame {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(invalid!(
                "rgb frame {height}x{width} needs {} bytes, got {}",
                3 * height * width,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Gray rendering of a silhouette, for corpora that ship masks only.
    pub fn from_mask(mask: &RawMask) -> Self {
        let plane: Vec<u8> = mask.pixels().iter().map(|&p| p * 255).collect();
        let mut data = Vec::with_capacity(plane.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Self {
            height: mask.height(),
            width: mask.width(),
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(invalid!("unknown split `{other}`")),
        }
    }
}

/// CASIA-B walking condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "NM")]
    Normal,
    #[serde(rename = "BG")]
    Bag,
    #[serde(rename = "CL")]
    Coat,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Normal, Condition::Bag, Condition::Coat];

    pub fn code(self) -> &'static str {
        match self {
            Condition::Normal => "nm",
            Condition::Bag => "bg",
            Condition::Coat => "cl",
        }
    }

    /// Number of sequences per identity under this condition.
    pub fn sequences(self) -> u8 {
        match self {
            Condition::Normal => 6,
            Condition::Bag | Condition::Coat => 2,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code().to_ascii_uppercase())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Condition::Normal),
            "bg" => Ok(Condition::Bag),
            "cl" => Ok(Condition::Coat),
            other => Err(invalid!("unknown walking condition `{other}`")),
        }
    }
}

/// The 11 CASIA-B view angles in degrees.
pub const VIEW_ANGLES: [u16; 11] = [0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180];

pub fn view_slot(view: u16) -> Option<usize> {
    VIEW_ANGLES.iter().position(|&v| v == view)
}

/// Gait-corpus metadata: present for CASIA-B-shaped data only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GaitMeta {
    pub view: u16,
    pub condition: Condition,
    pub seq_no: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub identity: u32,
    pub camera: u32,
    /// Tracklet / folder key, unique within a corpus.
    pub key: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gait: Option<GaitMeta>,
}

/// One tracklet with all frames and masks materialized.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub frames: Vec<RgbFrame>,
    pub masks: Vec<RawMask>,
    pub meta: SequenceMeta,
}

impl SequenceSample {
    pub fn new(frames: Vec<RgbFrame>, masks: Vec<RawMask>, meta: SequenceMeta) -> Result<Self> {
        if frames.is_empty() || frames.len() != masks.len() {
            return Err(invalid!(
                "sequence `{}` needs equally many (≥1) frames and masks, got {} and {}",
                meta.key,
                frames.len(),
                masks.len()
            ));
        }
        for (f, m) in frames.iter().zip(&masks) {
            if f.height() != m.height() || f.width() != m.width() {
                return Err(invalid!("sequence `{}`: frame and mask sizes differ", meta.key));
            }
        }
        Ok(Self {
            frames,
            masks,
            meta,
        })
    }
}

#[derive(Debug, Clone)]
pub enum SequenceSource {
    InMemory(Arc<SequenceSample>),
    OnDisk {
        frames: Vec<PathBuf>,
        masks: Vec<PathBuf>,
    },
    /// Silhouette-only corpora: frames are gray renderings of the masks.
    MasksOnly { masks: Vec<PathBuf> },
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub meta: SequenceMeta,
    pub source: SequenceSource,
    /// Indices of frames whose masks pass the effective-foreground rule; `None` until filtered.
    pub effective: Option<Vec<usize>>,
}

impl IndexEntry {
    pub fn in_memory(sample: SequenceSample) -> Self {
        Self {
            meta: sample.meta.clone(),
            source: SequenceSource::InMemory(Arc::new(sample)),
            effective: None,
        }
    }

    pub fn len(&self) -> usize {
        match &self.source {
            SequenceSource::InMemory(s) => s.frames.len(),
            SequenceSource::OnDisk { frames, .. } => frames.len(),
            SequenceSource::MasksOnly { masks } => masks.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame indices usable for sampling: the effective ones when known, else all.
    pub fn usable_frames(&self) -> Vec<usize> {
        match &self.effective {
            Some(e) => e.clone(),
            None => (0..self.len()).collect(),
        }
    }

    pub fn load_mask(&self, i: usize) -> Result<RawMask> {
        match &self.source {
            SequenceSource::InMemory(s) => s
                .masks
                .get(i)
                .cloned()
                .ok_or_else(|| invalid!("mask index {i} out of range")),
            SequenceSource::OnDisk { masks, .. } | SequenceSource::MasksOnly { masks } => {
                io::read_mask(masks.get(i).ok_or_else(|| invalid!("mask index {i} out of range"))?)
            }
        }
    }

    pub fn load_frame(&self, i: usize) -> Result<RgbFrame> {
        match &self.source {
            SequenceSource::InMemory(s) => s
                .frames
                .get(i)
                .cloned()
                .ok_or_else(|| invalid!("frame index {i} out of range")),
            SequenceSource::OnDisk { frames, .. } => {
                io::read_rgb(frames.get(i).ok_or_else(|| invalid!("frame index {i} out of range"))?)
            }
            SequenceSource::MasksOnly { .. } => Ok(RgbFrame::from_mask(&self.load_mask(i)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    MaskMars,
    CasiaB,
    Synthetic,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub ids: usize,
    pub sequences: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub ids: usize,
    pub sequences: usize,
    pub splits: BTreeMap<Split, SplitCounts>,
    pub length: LengthStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_slots: Option<usize>,
}

/// Immutable list of sequence descriptors. All counts are derived from `entries`.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub kind: CorpusKind,
    pub entries: Vec<IndexEntry>,
    /// For CASIA-B: ids × 110 sequence slots the layout should provide.
    pub expected_slots: Option<usize>,
}

impl DatasetIndex {
    pub fn new(kind: CorpusKind, entries: Vec<IndexEntry>) -> Self {
        Self {
            kind,
            entries,
            expected_slots: None,
        }
    }

    pub fn id_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.meta.identity)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn sequence_count(&self) -> usize {
        self.entries.len()
    }

    pub fn split_counts(&self, split: Split) -> SplitCounts {
        let entries: Vec<_> = self.entries.iter().filter(|e| e.meta.split == split).collect();
        SplitCounts {
            ids: entries
                .iter()
                .map(|e| e.meta.identity)
                .collect::<BTreeSet<_>>()
                .len(),
            sequences: entries.len(),
        }
    }

    pub fn has_gait_meta(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.meta.gait.is_some())
    }

    pub fn split(&self, split: Split) -> Vec<&IndexEntry> {
        self.entries.iter().filter(|e| e.meta.split == split).collect()
    }

    /// Train-split sequences grouped by identity, in ascending identity order.
    pub fn train_groups(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.meta.split == Split::Train {
                groups.entry(e.meta.identity).or_default().push(i);
            }
        }
        groups
    }

    /// Train identities with a single sequence (they supply no distinct positive pair).
    pub fn singleton_train_ids(&self) -> Vec<u32> {
        self.train_groups()
            .into_iter()
            .filter(|(_, v)| v.len() < 2)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn stats(&self) -> IndexStats {
        let mut splits = BTreeMap::new();
        for s in [Split::Train, Split::Query, Split::Gallery] {
            let c = self.split_counts(s);
            if c.sequences > 0 {
                splits.insert(s, c);
            }
        }
        let lengths: Vec<usize> = self.entries.iter().map(|e| e.len()).collect();
        let length = if lengths.is_empty() {
            LengthStats::default()
        } else {
            LengthStats {
                min: *lengths.iter().min().unwrap(),
                mean: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
                max: *lengths.iter().max().unwrap(),
            }
        };
        IndexStats {
            ids: self.id_count(),
            sequences: self.sequence_count(),
            splits,
            length,
            expected_slots: self.expected_slots,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_mask_rejects_non_binary_and_empty() {
        assert!(RawMask::new(2, 2, vec![0, 1, 2, 0]).is_err());
        assert!(RawMask::new(0, 3, vec![]).is_err());
        assert!(RawMask::new(2, 2, vec![0, 1]).is_err());
        assert!(RawMask::new(1, 1, vec![1]).is_ok());
    }

    #[test]
    fn sequence_requires_matching_lengths() {
        let meta = SequenceMeta {
            identity: 1,
            camera: 0,
            key: "t".into(),
            split: Split::Train,
            gait: None,
        };
        let f = RgbFrame::new(2, 2, vec![0; 12]).unwrap();
        let m = RawMask::filled(2, 2, true).unwrap();
        assert!(SequenceSample::new(vec![f.clone()], vec![], meta.clone()).is_err());
        assert!(SequenceSample::new(vec![], vec![], meta.clone()).is_err());
        assert!(SequenceSample::new(vec![f], vec![m], meta).is_ok());
    }

    #[test]
    fn parse_condition_and_split() {
        assert_eq!("BG".parse::<Condition>().unwrap(), Condition::Bag);
        assert_eq!("gallery".parse::<Split>().unwrap(), Split::Gallery);
        assert!("xx".parse::<Condition>().is_err());
        assert_eq!(view_slot(180), Some(10));
        assert_eq!(view_slot(17), None);
    }
}
