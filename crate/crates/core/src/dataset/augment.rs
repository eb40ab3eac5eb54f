use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::mask::area_resize_mask;
use crate::dataset::{Grid, RawMask, RgbFrame};
use crate::error::{invalid, shape_err, Result};

/// ImageNet channel statistics.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Planar 3 × H × W image with values in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    /// Mask grid size; must equal the backbone output size.
    pub mask_height: usize,
    pub mask_width: usize,
    pub crop_prob: f64,
    pub flip_prob: f64,
    /// Relative upscale before taking the random crop window.
    pub crop_margin: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            frame_height: 256,
            frame_width: 128,
            mask_height: 16,
            mask_width: 8,
            crop_prob: 0.5,
            flip_prob: 0.5,
            crop_margin: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Size of the upscaled frame from which crop windows are taken.
    pub fn crop_canvas(&self) -> (usize, usize) {
        (
            (self.frame_height as f64 * (1.0 + self.crop_margin)).round() as usize,
            (self.frame_width as f64 * (1.0 + self.crop_margin)).round() as usize,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_height == 0 || self.frame_width == 0 || self.mask_height == 0 || self.mask_width == 0 {
            return Err(invalid!("augmentation sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.crop_prob) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid!("augmentation probabilities must lie in [0, 1]"));
        }
        if !(self.crop_margin >= 0.0) {
            return Err(invalid!(
                "crop margin {} leaves no room for a {}x{} window",
                self.crop_margin,
                self.frame_height,
                self.frame_width
            ));
        }
        Ok(())
    }
}

/// Geometric decision shared by every frame of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDecision {
    /// Top-left corner of the crop window inside the upscaled canvas.
    pub crop: Option<(usize, usize)>,
    pub flip: bool,
}

impl AugmentDecision {
    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let crop = rng.random_bool(cfg.crop_prob).then(|| {
            let (ch, cw) = cfg.crop_canvas();
            (
                rng.random_range(0..=ch - cfg.frame_height),
                rng.random_range(0..=cw - cfg.frame_width),
            )
        });
        let flip = rng.random_bool(cfg.flip_prob);
        Self { crop, flip }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub frames: Vec<FloatImage>,
    pub masks: Vec<Grid>,
    pub decision: AugmentDecision,
}

/// Bilinear resampling with half-pixel centers, per plane.
fn bilinear_plane(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let taps = |s: usize, d: usize| -> Vec<(usize, usize, f32)> {
        let scale = s as f32 / d as f32;
        (0..d)
            .map(|i| {
                let pos = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f32);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(s - 1);
                (i0, i1, pos - i0 as f32)
            })
            .collect()
    };
    let ys = taps(sh, dh);
    let xs = taps(sw, dw);
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn resize_frame(frame: &RgbFrame, dh: usize, dw: usize) -> FloatImage {
    let (h, w) = (frame.height(), frame.width());
    let mut data = Vec::with_capacity(3 * dh * dw);
    for c in 0..3 {
        let plane: Vec<f32> = frame.data()[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| v as f32)
            .collect();
        data.extend(bilinear_plane(&plane, h, w, dh, dw));
    }
    FloatImage {
        height: dh,
        width: dw,
        data,
    }
}

fn crop_planes(data: &[f32], planes: usize, h: usize, w: usize, oy: usize, ox: usize, ch: usize, cw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(planes * ch * cw);
    for p in 0..planes {
        for y in oy..oy + ch {
            let start = (p * h + y) * w + ox;
            out.extend_from_slice(&data[start..start + cw]);
        }
    }
    out
}

fn flip_planes(data: &mut [f32], width: usize) {
    for row in data.chunks_mut(width) {
        row.reverse();
    }
}

/// Applies a fixed decision to a whole sequence.
pub fn augment_pair_with(
    frames: &[RgbFrame],
    masks: &[RawMask],
    cfg: &AugmentConfig,
    decision: AugmentDecision,
) -> Result<AugmentedPair> {
    cfg.validate()?;
    if frames.len() != masks.len() || frames.is_empty() {
        return Err(invalid!(
            "augment_pair needs equally many (≥1) frames and masks, got {} and {}",
            frames.len(),
            masks.len()
        ));
    }
    let (th, tw) = (cfg.frame_height, cfg.frame_width);
    let (mh, mw) = (cfg.mask_height, cfg.mask_width);
    let mut out_frames = Vec::with_capacity(frames.len());
    let mut out_masks = Vec::with_capacity(masks.len());
    for (frame, mask) in frames.iter().zip(masks) {
        if frame.height() != mask.height() || frame.width() != mask.width() {
            return Err(shape_err!("frame and mask sizes differ"));
        }
        let (mut image, mut coarse) = match decision.crop {
            None => (resize_frame(frame, th, tw), area_resize_mask(&mask.to_grid(), mh, mw)),
            Some((oy, ox)) => {
                let (ch, cw) = cfg.crop_canvas();
                if oy + th > ch || ox + tw > cw {
                    return Err(invalid!("crop window ({oy},{ox}) exceeds the {ch}x{cw} canvas"));
                }
                let big = resize_frame(frame, ch, cw);
                let image = FloatImage {
                    height: th,
                    width: tw,
                    data: crop_planes(&big.data, 3, ch, cw, oy, ox, th, tw),
                };
                let big_mask = area_resize_mask(&mask.to_grid(), ch, cw);
                let window = Grid {
                    height: th,
                    width: tw,
                    data: crop_planes(&big_mask.data, 1, ch, cw, oy, ox, th, tw),
                };
                (image, area_resize_mask(&window, mh, mw))
            }
        };
        if decision.flip {
            flip_planes(&mut image.data, tw);
            flip_planes(&mut coarse.data, mw);
        }
        out_frames.push(image);
        out_masks.push(coarse);
    }
    Ok(AugmentedPair {
        frames: out_frames,
        masks: out_masks,
        decision,
    })
}

/// Sequence-level random crop and flip: one decision drawn, applied to every frame.
pub fn augment_pair<R: Rng + ?Sized>(
    frames: &[RgbFrame],
    masks: &[RawMask],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedPair> {
    cfg.validate()?;
    let decision = AugmentDecision::draw(cfg, rng);
    augment_pair_with(frames, masks, cfg, decision)
}

/// `(v/255 − mean_c) / std_c`, concatenated frame after frame (T × 3 × H × W).
pub fn normalize_frames(frames: &[FloatImage]) -> Vec<f32> {
    let mut out = Vec::with_capacity(frames.iter().map(|f| f.data.len()).sum());
    for f in frames {
        let plane = f.height * f.width;
        for c in 0..3 {
            let (m, s) = (CHANNEL_MEAN[c], CHANNEL_STD[c]);
            out.extend(f.data[c * plane..(c + 1) * plane].iter().map(|&v| (v / 255.0 - m) / s));
        }
    }
    out
}

pub fn denormalize_frame(values: &[f32], height: usize, width: usize) -> FloatImage {
    let plane = height * width;
    let mut data = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let (m, s) = (CHANNEL_MEAN[c], CHANNEL_STD[c]);
        data.extend(values[c * plane..(c + 1) * plane].iter().map(|&v| (v * s + m) * 255.0));
    }
    FloatImage {
        height,
        width,
        data,
    }
}

pub fn to_float(frame: &RgbFrame) -> FloatImage {
    FloatImage {
        height: frame.height(),
        width: frame.width(),
        data: frame.data().iter().map(|&v| v as f32).collect(),
    }
}
