//! Appearance network: a pluggable backbone, a global branch and a foreground-masked
//! branch over the same feature maps, each reduced to 512-d by its own bottleneck.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Linear, Mode, Norm, NormKind, Scope};

/// Total spatial reduction of every backbone.
pub const BACKBONE_STRIDE: usize = 16;
pub const EMBED_DIM: usize = 512;
/// Masks with less total weight than this fall back to the plain spatial mean.
pub const EMPTY_MASK_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackboneConfig {
    /// Small four-stage CNN for desk-scale runs.
    Reference { channels: usize },
    /// ResNet-50 with last stride 1; `weights` is a safetensors file with torchvision names.
    Resnet50 {
        #[serde(default)]
        weights: Option<PathBuf>,
    },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Reference { channels: 128 }
    }
}

impl BackboneConfig {
    pub fn channels(&self) -> usize {
        match self {
            BackboneConfig::Reference { channels } => *channels,
            BackboneConfig::Resnet50 { .. } => 2048,
        }
    }
}

/// Maps normalized frames (B, 3, H, W) to (B, C, H/16, W/16).
pub trait Backbone: Send + Sync + std::fmt::Debug {
    fn forward(&self, frames: &Tensor, mode: Mode) -> Result<Tensor>;
    fn channels(&self) -> usize;
    /// True when weights came from an external pretrained file.
    fn pretrained(&self) -> bool;
}

fn check_input(frames: &Tensor) -> Result<(usize, usize)> {
    let dims = frames.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(shape_err!("backbone expects (B, 3, H, W), got {dims:?}"));
    }
    let (h, w) = (dims[2], dims[3]);
    if h == 0 || w == 0 || h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
        return Err(shape_err!(
            "backbone input {h}×{w} is not a positive multiple of {BACKBONE_STRIDE}"
        ));
    }
    Ok((h, w))
}

/// stem 4×4/4, then 3×3/2, 3×3/2, 3×3/1 with channels (C/4, C/2, C, C).
#[derive(Debug)]
pub struct ReferenceCnn {
    convs: Vec<Conv2d>,
    channels: usize,
}

impl ReferenceCnn {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        if channels < 4 {
            return Err(Error::Config(format!("reference backbone needs ≥ 4 channels, got {channels}")));
        }
        let plan = [
            (3, channels / 4, 4, 4, 0),
            (channels / 4, channels / 2, 3, 2, 1),
            (channels / 2, channels, 3, 2, 1),
            (channels, channels, 3, 1, 1),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k, s, p))| Conv2d::new(&scope.pp(format!("conv{}", i + 1)), cin, cout, k, s, p, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs, channels })
    }
}

impl Backbone for ReferenceCnn {
    fn forward(&self, frames: &Tensor, _mode: Mode) -> Result<Tensor> {
        check_input(frames)?;
        let mut x = frames.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x)
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn pretrained(&self) -> bool {
        false
    }
}

#[derive(Debug)]
struct ResBlock {
    conv1: Conv2d,
    bn1: Norm,
    conv2: Conv2d,
    bn2: Norm,
    conv3: Conv2d,
    bn3: Norm,
    downsample: Option<(Conv2d, Norm)>,
}

impl ResBlock {
    fn new(scope: &Scope, cin: usize, width: usize, stride: usize) -> Result<Self> {
        let cout = width * 4;
        let downsample = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(&scope.pp("downsample").pp("0"), cin, cout, 1, stride, 0, false)?,
                Norm::new(&scope.pp("downsample").pp("1"), NormKind::Batch, cout, true)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&scope.pp("conv1"), cin, width, 1, 1, 0, false)?,
            bn1: Norm::new(&scope.pp("bn1"), NormKind::Batch, width, true)?,
            conv2: Conv2d::new(&scope.pp("conv2"), width, width, 3, stride, 1, false)?,
            bn2: Norm::new(&scope.pp("bn2"), NormKind::Batch, width, true)?,
            conv3: Conv2d::new(&scope.pp("conv3"), width, cout, 1, 1, 0, false)?,
            bn3: Norm::new(&scope.pp("bn3"), NormKind::Batch, cout, true)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, mode)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// ResNet-50 without the classifier and with the last stage's stride set to 1.
#[derive(Debug)]
pub struct ResNet50 {
    conv1: Conv2d,
    bn1: Norm,
    layers: Vec<Vec<ResBlock>>,
    pretrained: bool,
}

impl ResNet50 {
    pub fn new(scope: &Scope) -> Result<Self> {
        let mut layers = Vec::new();
        let mut cin = 64;
        for (i, &(blocks, width, stride)) in [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 1)].iter().enumerate() {
            let layer_scope = scope.pp(format!("layer{}", i + 1));
            let mut layer = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                layer.push(ResBlock::new(&layer_scope.pp(b.to_string()), cin, width, s)?);
                cin = width * 4;
            }
            layers.push(layer);
        }
        Ok(Self {
            conv1: Conv2d::new(&scope.pp("conv1"), 3, 64, 7, 2, 3, false)?,
            bn1: Norm::new(&scope.pp("bn1"), NormKind::Batch, 64, true)?,
            layers,
            pretrained: false,
        })
    }

    /// Loads torchvision-named weights into the `backbone` group of `scope`'s store.
    pub fn load_weights(&mut self, scope: &Scope, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file = safetensors::SafeTensors::deserialize(&bytes)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in file.tensors() {
            if name.starts_with("fc.") || name.ends_with("num_batches_tracked") {
                continue;
            }
            let t = tensor_from_view(&view).map_err(|reason| Error::Checkpoint {
                component: "backbone".into(),
                reason: format!("{name}: {reason}"),
            })?;
            tensors.insert(format!("backbone.{name}"), t);
        }
        scope.store().load(&tensors)?;
        self.pretrained = true;
        Ok(())
    }
}

pub(crate) fn tensor_from_view(view: &safetensors::tensor::TensorView<'_>) -> std::result::Result<Tensor, String> {
    use safetensors::Dtype;
    let shape = view.shape().to_vec();
    let data = view.data();
    let dev = Device::Cpu;
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)
        }
        other => return Err(format!("unsupported dtype {other:?}")),
    };
    t.map_err(|e| e.to_string())
}

impl Backbone for ResNet50 {
    fn forward(&self, frames: &Tensor, mode: Mode) -> Result<Tensor> {
        check_input(frames)?;
        let x = self.bn1.forward(&self.conv1.forward(frames)?, mode)?.relu()?;
        // 3×3/2 max pool with padding 1; edge replication gives the same maxima as -inf padding
        let x = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x, mode)?;
            }
        }
        Ok(x)
    }

    fn channels(&self) -> usize {
        2048
    }

    fn pretrained(&self) -> bool {
        self.pretrained
    }
}

pub fn build_backbone(scope: &Scope, cfg: &BackboneConfig) -> Result<Box<dyn Backbone>> {
    match cfg {
        BackboneConfig::Reference { channels } => Ok(Box::new(ReferenceCnn::new(scope, *channels)?)),
        BackboneConfig::Resnet50 { weights } => {
            let mut net = ResNet50::new(scope)?;
            match weights {
                Some(path) => net.load_weights(scope, path)?,
                None => log::info!("no pretrained backbone weights configured; using random initialization"),
            }
            Ok(Box::new(net))
        }
    }
}

/// FC(in→hidden) → norm → ReLU → FC(hidden→512) → norm → ReLU.
#[derive(Debug)]
pub struct Bottleneck {
    fc1: Linear,
    norm1: Norm,
    fc2: Linear,
    norm2: Norm,
}

impl Bottleneck {
    pub fn new(scope: &Scope, in_dim: usize, hidden: usize, norm: NormKind, affine: bool) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), in_dim, hidden, true)?,
            norm1: Norm::new(&scope.pp("norm1"), norm, hidden, affine)?,
            fc2: Linear::new(&scope.pp("fc2"), hidden, EMBED_DIM, true)?,
            norm2: Norm::new(&scope.pp("norm2"), norm, EMBED_DIM, affine)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.norm1.forward(&self.fc1.forward(x)?, mode)?.relu()?;
        Ok(self.norm2.forward(&self.fc2.forward(&y)?, mode)?.relu()?)
    }

    /// Weight count of the two FC layers.
    pub fn weight_count(&self) -> usize {
        self.fc1.weight.elem_count() + self.fc2.weight.elem_count()
    }
}

/// Per-frame weighted spatial mean: maps (B, C, h, w), masks (B, h, w) -> (B, C).
/// Frames whose mask sums below [`EMPTY_MASK_EPS`] use the plain spatial mean; their count
/// is returned alongside.
pub fn masked_avg_pool(maps: &Tensor, masks: &Tensor) -> Result<(Tensor, usize)> {
    let (b, _c, h, w) = maps.dims4()?;
    if masks.dims() != [b, h, w] {
        return Err(shape_err!("mask shape {:?} does not match feature maps {:?}", masks.dims(), maps.dims()));
    }
    let masks = masks.to_dtype(maps.dtype())?.detach();
    let sums: Vec<f64> = masks.sum((1, 2))?.to_dtype(DType::F64)?.to_vec1()?;
    let empty: Vec<bool> = sums.iter().map(|&s| s < EMPTY_MASK_EPS).collect();
    let fallbacks = empty.iter().filter(|&&e| e).count();
    let masks = if fallbacks > 0 {
        let ones = Tensor::ones((h, w), maps.dtype(), maps.device())?;
        let rows = (0..b)
            .map(|i| if empty[i] { Ok(ones.clone()) } else { masks.get(i) })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Tensor::stack(&rows, 0)?
    } else {
        masks
    };
    let num = maps.broadcast_mul(&masks.unsqueeze(1)?)?.sum((2, 3))?;
    let den = masks.sum((1, 2))?.unsqueeze(1)?;
    Ok((num.broadcast_div(&den)?, fallbacks))
}

/// Plain spatial mean through the masked path with an all-ones mask.
pub fn spatial_mean(maps: &Tensor) -> Result<Tensor> {
    let (b, _c, h, w) = maps.dims4()?;
    let ones = Tensor::ones((b, h, w), maps.dtype(), maps.device())?;
    Ok(masked_avg_pool(maps, &ones)?.0)
}

/// (N·T, C) -> (N, C) mean over each group of T consecutive rows.
pub fn temporal_mean(frames: &Tensor, n: usize, t: usize) -> Result<Tensor> {
    let c = frames.dim(1)?;
    Ok((frames.reshape((n, t, c))?.sum(1)? / t as f64)?)
}

#[derive(Debug, Clone)]
pub struct AppearanceFeatures {
    pub global_2048: Tensor,
    pub global_512: Tensor,
    pub foreground_2048: Option<Tensor>,
    pub foreground_512: Option<Tensor>,
}

/// Per-frame pooled vectors before temporal averaging.
#[derive(Debug, Clone)]
pub struct FrameVectors {
    pub global: Tensor,
    pub foreground: Option<Tensor>,
}

#[derive(Debug)]
pub struct AppearanceNet {
    pub backbone: Box<dyn Backbone>,
    pub global_bottleneck: Bottleneck,
    pub fg_bottleneck: Option<Bottleneck>,
    fallbacks: AtomicUsize,
}

impl AppearanceNet {
    pub fn new(
        root: &Scope,
        backbone: &BackboneConfig,
        hidden: usize,
        norm: NormKind,
        foreground: bool,
    ) -> Result<Self> {
        let backbone = build_backbone(&root.pp("backbone"), backbone)?;
        let c = backbone.channels();
        let global_bottleneck = Bottleneck::new(&root.pp("global_bottleneck"), c, hidden, norm, true)?;
        let fg_bottleneck = if foreground {
            Some(Bottleneck::new(&root.pp("fg_bottleneck"), c, hidden, norm, true)?)
        } else {
            None
        };
        Ok(Self {
            backbone,
            global_bottleneck,
            fg_bottleneck,
            fallbacks: AtomicUsize::new(0),
        })
    }

    /// Frames whose empty mask triggered the spatial-mean fallback so far.
    pub fn empty_mask_fallbacks(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    /// frames (B, 3, H, W), masks (B, H/16, W/16) -> per-frame pooled vectors.
    pub fn frame_vectors(&self, frames: &Tensor, masks: &Tensor, mode: Mode) -> Result<FrameVectors> {
        let maps = self.backbone.forward(frames, mode)?;
        self.pool_maps(&maps, masks)
    }

    pub fn pool_maps(&self, maps: &Tensor, masks: &Tensor) -> Result<FrameVectors> {
        let global = spatial_mean(maps)?;
        let foreground = if self.fg_bottleneck.is_some() {
            let (v, n) = masked_avg_pool(maps, masks)?;
            if n > 0 {
                self.fallbacks.fetch_add(n, Ordering::Relaxed);
                log::warn!("{n} frame(s) with empty foreground mask pooled over the whole map");
            }
            Some(v)
        } else {
            None
        };
        Ok(FrameVectors { global, foreground })
    }

    /// Applies the bottlenecks to sequence-level (N, C) vectors.
    pub fn heads(&self, global: Tensor, foreground: Option<Tensor>, mode: Mode) -> Result<AppearanceFeatures> {
        let global_512 = self.global_bottleneck.forward(&global, mode)?;
        let foreground_512 = match (&self.fg_bottleneck, &foreground) {
            (Some(b), Some(f)) => Some(b.forward(f, mode)?),
            _ => None,
        };
        Ok(AppearanceFeatures {
            global_2048: global,
            global_512,
            foreground_2048: foreground,
            foreground_512,
        })
    }

    /// frames (N, T, 3, H, W), masks (N, T, H/16, W/16).
    pub fn forward(&self, frames: &Tensor, masks: &Tensor, mode: Mode) -> Result<AppearanceFeatures> {
        let dims = frames.dims();
        if dims.len() != 5 {
            return Err(shape_err!("appearance frames must be (N, T, 3, H, W), got {dims:?}"));
        }
        let (n, t) = (dims[0], dims[1]);
        if t == 0 {
            return Err(shape_err!("appearance branch needs T ≥ 1"));
        }
        let mdims = masks.dims();
        if mdims.len() != 4 || mdims[0] != n || mdims[1] != t {
            return Err(shape_err!("appearance masks must be (N, T, h, w) matching frames, got {mdims:?}"));
        }
        let flat = frames.reshape((n * t, dims[2], dims[3], dims[4]))?;
        let flat_masks = masks.reshape((n * t, mdims[2], mdims[3]))?;
        let v = self.frame_vectors(&flat, &flat_masks, mode)?;
        let global = temporal_mean(&v.global, n, t)?;
        let foreground = v.foreground.map(|f| temporal_mean(&f, n, t)).transpose()?;
        self.heads(global, foreground, mode)
    }
}
