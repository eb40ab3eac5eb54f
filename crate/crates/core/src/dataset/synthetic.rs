//! Procedural corpora with exact bookkeeping: walking figures whose texture, body shape and
//! gait period depend on the identity.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::casia::split_for;
use crate::dataset::io::write_mask;
use crate::dataset::mars::id_dir;
use crate::dataset::{
    view_slot, Condition, CorpusKind, DatasetIndex, GaitMeta, IndexEntry, RawMask, RgbFrame, SequenceMeta,
    SequenceSample, Split,
};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Every sequence in the train split.
    AllTrain,
    /// First half of the identities train; for the rest, sequence 0 is a query and the
    /// others are gallery.
    TrainTest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub identities: usize,
    pub sequences_per_id: usize,
    pub frames_per_sequence: usize,
    /// Frames per sequence rendered with most of the body hidden (ineffective masks).
    pub occluded_frames: usize,
    pub height: usize,
    pub width: usize,
    pub cameras: u32,
    pub split: SplitMode,
    pub seed: u64,
    /// Identity numbering starts here.
    pub first_id: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            identities: 8,
            sequences_per_id: 4,
            frames_per_sequence: 12,
            occluded_frames: 2,
            height: 128,
            width: 64,
            cameras: 2,
            split: SplitMode::AllTrain,
            seed: 0,
            first_id: 1,
        }
    }
}

/// Per-identity appearance and gait parameters.
#[derive(Debug, Clone)]
struct Walker {
    torso: [u8; 3],
    stripe: [u8; 3],
    legs: [u8; 3],
    stripe_period: usize,
    height_frac: f64,
    torso_half_width: f64,
    leg_half_width: f64,
    period: f64,
    swing: f64,
}

impl Walker {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let color = |rng: &mut ChaCha8Rng| [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
        Self {
            torso: color(rng),
            stripe: color(rng),
            legs: color(rng),
            stripe_period: rng.random_range(3..9),
            height_frac: rng.random_range(0.80..0.95),
            torso_half_width: rng.random_range(0.17..0.24),
            leg_half_width: rng.random_range(0.06..0.09),
            period: rng.random_range(6.0..14.0),
            swing: rng.random_range(0.25..0.5),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    center_x: f64,
    phase: f64,
    /// Horizontal foreshortening (1 = side view).
    width_scale: f64,
    swing_scale: f64,
    bag: bool,
    coat: bool,
}

struct Rendered {
    frame: RgbFrame,
    mask: RawMask,
}

fn point_segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn render(w: &Walker, pose: Pose, t: usize, h: usize, wd: usize, occluded: bool, bg: &[u8], rng: &mut ChaCha8Rng) -> Rendered {
    let (hf, wf) = (h as f64, wd as f64);
    let figure_h = w.height_frac * hf;
    let top = (hf - figure_h) / 2.0;
    let head_r = figure_h * 0.08;
    let head_cy = top + head_r;
    let shoulder_y = top + 2.0 * head_r;
    let hip_y = top + figure_h * 0.52;
    let foot_y = top + figure_h;
    let torso_hw = w.torso_half_width * wf * pose.width_scale * if pose.coat { 1.3 } else { 1.0 };
    let leg_hw = w.leg_half_width * wf;
    let angle = pose.swing_scale * w.swing * (2.0 * PI * t as f64 / w.period + pose.phase).sin();
    let leg_len = foot_y - hip_y;
    let cx = pose.center_x;
    let feet = [
        (cx + leg_len * angle.sin(), hip_y + leg_len * angle.cos()),
        (cx - leg_len * angle.sin(), hip_y + leg_len * angle.cos()),
    ];
    let occlusion_y = shoulder_y + (hip_y - shoulder_y) * 0.2;

    let mut mask = vec![0u8; h * wd];
    let mut frame = bg.to_vec();
    let plane = h * wd;
    for y in 0..h {
        for x in 0..wd {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let head = (px - cx).powi(2) + (py - head_cy).powi(2) <= head_r * head_r;
            let torso = py >= shoulder_y && py <= hip_y && (px - cx).abs() <= torso_hw;
            let leg = feet
                .iter()
                .any(|&(fx, fy)| point_segment_distance(px, py, cx, hip_y, fx, fy) <= leg_hw);
            let bag = pose.bag
                && (px - (cx + torso_hw)).powi(2) / (0.8 * torso_hw).powi(2)
                    + (py - hip_y).powi(2) / (0.15 * figure_h).powi(2)
                    <= 1.0;
            let mut fg = head || torso || leg || bag;
            if occluded && py > occlusion_y {
                fg = false;
            }
            if !fg {
                continue;
            }
            mask[y * wd + x] = 1;
            let color = if torso || head {
                if (y / w.stripe_period) % 2 == 0 {
                    w.torso
                } else {
                    w.stripe
                }
            } else if bag {
                [40, 40, 40]
            } else {
                w.legs
            };
            for c in 0..3 {
                let jitter: i16 = rng.random_range(-6..=6);
                frame[c * plane + y * wd + x] = (color[c] as i16 + jitter).clamp(0, 255) as u8;
            }
        }
    }
    Rendered {
        frame: RgbFrame::new(h, wd, frame).expect("sized"),
        mask: RawMask::new(h, wd, mask).expect("binary"),
    }
}

fn background(h: usize, w: usize, camera: u32, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let tint = [(camera * 67 % 256) as i16, (camera * 131 % 256) as i16, (camera * 29 % 256) as i16];
    let mut out = vec![0u8; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let base = 90 + tint[c] / 4 + ((x + 2 * y) % 17) as i16;
                let noise: i16 = rng.random_range(-20..=20);
                out[(c * h + y) * w + x] = (base + noise).clamp(0, 255) as u8;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub index: DatasetIndex,
    /// Keys of sequences that satisfy the default effective-mask rule (≥ 8 frames ≥ 15%).
    pub expected_passing: Vec<String>,
    /// Effective mask count per sequence key, counted while rendering.
    pub effective_counts: Vec<(String, usize)>,
}

/// Renders a Mask-MARS-shaped corpus in memory.
pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let walkers: Vec<Walker> = (0..cfg.identities).map(|_| Walker::sample(&mut rng)).collect();
    let mut entries = Vec::new();
    let mut expected_passing = Vec::new();
    let mut effective_counts = Vec::new();
    let train_ids = match cfg.split {
        SplitMode::AllTrain => cfg.identities,
        SplitMode::TrainTest => cfg.identities / 2,
    };
    for (i, walker) in walkers.iter().enumerate() {
        let id = cfg.first_id + i as u32;
        for s in 0..cfg.sequences_per_id {
            let camera = s as u32 % cfg.cameras.max(1);
            let split = if i < train_ids {
                Split::Train
            } else if s == 0 {
                Split::Query
            } else {
                Split::Gallery
            };
            let pose = Pose {
                center_x: cfg.width as f64 / 2.0 + rng.random_range(-2.0..2.0),
                phase: rng.random_range(0.0..2.0 * PI),
                width_scale: 1.0,
                swing_scale: 1.0,
                bag: false,
                coat: false,
            };
            let bg = background(cfg.height, cfg.width, camera, &mut rng);
            let occluded: Vec<bool> = {
                let mut flags = vec![false; cfg.frames_per_sequence];
                let n = cfg.occluded_frames.min(cfg.frames_per_sequence);
                for f in flags.iter_mut().take(n) {
                    *f = true;
                }
                // spread occluded frames through the sequence
                for j in (1..flags.len()).rev() {
                    let k = rng.random_range(0..=j);
                    flags.swap(j, k);
                }
                flags
            };
            let mut frames = Vec::with_capacity(cfg.frames_per_sequence);
            let mut masks = Vec::with_capacity(cfg.frames_per_sequence);
            let mut effective = 0;
            for (t, &occ) in occluded.iter().enumerate() {
                let r = render(walker, pose, t, cfg.height, cfg.width, occ, &bg, &mut rng);
                // counted independently of the filter implementation
                let ones = r.mask.pixels().iter().map(|&p| p as usize).sum::<usize>();
                if ones * 100 >= 15 * cfg.height * cfg.width {
                    effective += 1;
                }
                frames.push(r.frame);
                masks.push(r.mask);
            }
            let key = format!("{}/c{camera}s{s:02}", id_dir(id));
            if effective >= 8 {
                expected_passing.push(key.clone());
            }
            effective_counts.push((key.clone(), effective));
            let meta = SequenceMeta {
                identity: id,
                camera,
                key,
                split,
                gait: None,
            };
            entries.push(IndexEntry::in_memory(
                SequenceSample::new(frames, masks, meta).expect("consistent sample"),
            ));
        }
    }
    SyntheticCorpus {
        index: DatasetIndex::new(CorpusKind::Synthetic, entries),
        expected_passing,
        effective_counts,
    }
}

/// One sequence of block masks for exercising the construction rules: `effective` masks
/// at exactly the 15% boundary or above, `ineffective` masks just below it.
pub fn rule_sequence(id: u32, key: &str, effective: usize, boundary: usize, ineffective: usize) -> IndexEntry {
    // 100x100 frames: 1500 ones is exactly 15%, 1499 is just under.
    let block = |count: usize| RawMask::from_fn(100, 100, |y, x| y * 100 + x < count).unwrap();
    let mut masks = Vec::new();
    masks.extend((0..effective).map(|i| block(1600 + 37 * i)));
    masks.extend((0..boundary).map(|_| block(1500)));
    masks.extend((0..ineffective).map(|_| block(1499)));
    let frames = masks.iter().map(RgbFrame::from_mask).collect();
    let meta = SequenceMeta {
        identity: id,
        camera: 0,
        key: key.to_string(),
        split: Split::Train,
        gait: None,
    };
    IndexEntry::in_memory(SequenceSample::new(frames, masks, meta).expect("consistent sample"))
}

/// Synthetic CASIA-B silhouette tree under `root`; returns the number of sequences written.
pub fn write_casia_tree(
    root: &Path,
    ids: &[u32],
    views: &[u16],
    frames_per_sequence: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = 0;
    for &id in ids {
        let walker = Walker::sample(&mut ChaCha8Rng::seed_from_u64(seed ^ (id as u64 * 0x9E37_79B9)));
        for condition in Condition::ALL {
            for seq_no in 1..=condition.sequences() {
                for &view in views {
                    let side = (view as f64).to_radians().sin().abs();
                    let pose = Pose {
                        center_x: size.1 as f64 / 2.0 + rng.random_range(-2.0..2.0),
                        phase: rng.random_range(0.0..2.0 * PI),
                        width_scale: 0.7 + 0.3 * (1.0 - side),
                        swing_scale: 0.3 + 0.7 * side,
                        bag: condition == Condition::Bag,
                        coat: condition == Condition::Coat,
                    };
                    let bg = vec![0u8; 3 * size.0 * size.1];
                    let dir = root
                        .join(format!("{id:03}"))
                        .join(format!("{}-{seq_no:02}", condition.code()))
                        .join(format!("{view:03}"));
                    for t in 0..frames_per_sequence {
                        let r = render(&walker, pose, t, size.0, size.1, false, &bg, &mut rng);
                        write_mask(&r.mask, &dir.join(format!("{t:03}.png")))?;
                    }
                    written += 1;
                }
            }
        }
    }
    Ok(written)
}

/// In-memory CASIA-shaped index (for evaluation tests without touching disk).
pub fn casia_index(ids: &[u32], views: &[u16], frames_per_sequence: usize, size: (usize, usize), seed: u64) -> DatasetIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for &id in ids {
        let walker = Walker::sample(&mut ChaCha8Rng::seed_from_u64(seed ^ (id as u64 * 0x9E37_79B9)));
        for condition in Condition::ALL {
            for seq_no in 1..=condition.sequences() {
                for &view in views {
                    let side = (view as f64).to_radians().sin().abs();
                    let pose = Pose {
                        center_x: size.1 as f64 / 2.0,
                        phase: rng.random_range(0.0..2.0 * PI),
                        width_scale: 0.7 + 0.3 * (1.0 - side),
                        swing_scale: 0.3 + 0.7 * side,
                        bag: condition == Condition::Bag,
                        coat: condition == Condition::Coat,
                    };
                    let bg = vec![0u8; 3 * size.0 * size.1];
                    let rendered: Vec<Rendered> = (0..frames_per_sequence)
                        .map(|t| render(&walker, pose, t, size.0, size.1, false, &bg, &mut rng))
                        .collect();
                    let masks: Vec<RawMask> = rendered.iter().map(|r| r.mask.clone()).collect();
                    let frames = masks.iter().map(RgbFrame::from_mask).collect();
                    let meta = SequenceMeta {
                        identity: id,
                        camera: view_slot(view).unwrap_or(0) as u32,
                        key: crate::dataset::casia::sequence_key(id, condition, seq_no, view),
                        split: split_for(id, condition, seq_no),
                        gait: Some(GaitMeta {
                            view,
                            condition,
                            seq_no,
                        }),
                    };
                    entries.push(IndexEntry::in_memory(
                        SequenceSample::new(frames, masks, meta).expect("consistent sample"),
                    ));
                }
            }
        }
    }
    DatasetIndex::new(CorpusKind::CasiaB, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{filter_corpus, foreground_ratio};

    #[test]
    fn walkers_are_effective_unless_occluded() {
        let corpus = generate(&SyntheticConfig {
            identities: 2,
            sequences_per_id: 2,
            ..Default::default()
        });
        for e in &corpus.index.entries {
            let ratios: Vec<f64> = (0..e.len())
                .map(|i| foreground_ratio(&e.load_mask(i).unwrap()).unwrap())
                .collect();
            let effective = ratios.iter().filter(|&&r| r >= 0.15).count();
            assert_eq!(effective, 10, "{ratios:?}");
            assert!(ratios.iter().all(|&r| r < 0.6));
        }
        assert_eq!(corpus.expected_passing.len(), 4);
    }

    #[test]
    fn generator_bookkeeping_matches_filter() {
        let corpus = generate(&SyntheticConfig {
            identities: 3,
            sequences_per_id: 2,
            frames_per_sequence: 10,
            occluded_frames: 2,
            ..Default::default()
        });
        let out = filter_corpus(&corpus.index, 8, 0.15).unwrap();
        let kept: Vec<String> = out.index.entries.iter().map(|e| e.meta.key.clone()).collect();
        assert_eq!(kept, corpus.expected_passing);
    }

    #[test]
    fn rule_sequences_hit_the_boundary() {
        let e = rule_sequence(1, "x", 1, 1, 1);
        let r: Vec<f64> = (0..3).map(|i| foreground_ratio(&e.load_mask(i).unwrap()).unwrap()).collect();
        assert_eq!(r[1], 0.15);
        assert!(r[0] > 0.15 && r[2] < 0.15);
    }

    #[test]
    fn casia_tree_round_trips_through_parser() {
        let dir = tempfile::tempdir().unwrap();
        let n = write_casia_tree(dir.path(), &[74, 75], &[0, 90], 3, (64, 48), 1).unwrap();
        assert_eq!(n, 2 * 10 * 2);
        let out = crate::dataset::casia::parse_casia_b(dir.path(), None).unwrap();
        assert_eq!(out.index.sequence_count(), 40);
        assert_eq!(out.index.expected_slots, Some(220));
        assert_eq!(out.missing.len(), 220 - 40);
        assert_eq!(out.index.split_counts(Split::Gallery).sequences, 8);
        assert_eq!(out.index.split_counts(Split::Query).sequences, 12);
    }
}
