//! Feature fusion and end-to-end model assembly.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::TrainBatch;
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::appearance::{AppearanceFeatures, AppearanceNet, BackboneConfig, EMBED_DIM};
use crate::model::gait::{GaitFeatures, GaitNet, HEAD_DIM, STAGE_CHANNELS};
use crate::nn::{sigmoid, Linear, Mode, NormKind, ParamStore, Scope};

/// Checkpoint parameter groups in canonical order.
pub const GROUPS: [&str; 8] = [
    "backbone",
    "global_bottleneck",
    "fg_bottleneck",
    "gait_main",
    "gait_mgp",
    "gait_heads",
    "ffm",
    "classifiers",
];

/// Channel gate with residual: y = x + x ⊙ σ(FC₂(ReLU(FC₁ x))).
#[derive(Debug)]
pub struct Ffm {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffm {
    pub fn new(scope: &Scope, dim: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || dim % ratio != 0 {
            return Err(config_err!("FFM ratio {ratio} must divide the feature dimension {dim}"));
        }
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), dim, dim / ratio, true)?,
            fc2: Linear::new(&scope.pp("fc2"), dim / ratio, dim, true)?,
        })
    }

    pub fn gate(&self, x: &Tensor) -> Result<Tensor> {
        sigmoid(&self.fc2.forward(&self.fc1.forward(x)?.relu()?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.gate(x)?;
        Ok((x + (x * g)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchFlags {
    pub global: bool,
    pub foreground: bool,
    pub gait: bool,
    pub ffm: bool,
}

impl Default for BranchFlags {
    fn default() -> Self {
        Variant::AGFusion.flags()
    }
}

impl BranchFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.global && !self.gait {
            return Err(config_err!("at least one of the global and gait branches must be active"));
        }
        if self.foreground && !self.global {
            return Err(config_err!("the foreground branch shares the global branch's backbone; enable global"));
        }
        Ok(())
    }

    pub fn appearance(&self) -> bool {
        self.global
    }

    pub fn descriptor_dim(&self) -> usize {
        EMBED_DIM * (self.global as usize + self.foreground as usize + self.gait as usize)
    }
}

/// The four two/three-branch, concat/fusion configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    GGConcat,
    GGFusion,
    AGConcat,
    AGFusion,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::GGConcat, Variant::GGFusion, Variant::AGConcat, Variant::AGFusion];

    pub fn flags(self) -> BranchFlags {
        let (foreground, ffm) = match self {
            Variant::GGConcat => (false, false),
            Variant::GGFusion => (false, true),
            Variant::AGConcat => (true, false),
            Variant::AGFusion => (true, true),
        };
        BranchFlags {
            global: true,
            foreground,
            gait: true,
            ffm,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err!("unknown variant `{s}` (expected GGConcat, GGFusion, AGConcat or AGFusion)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub bottleneck_hidden: usize,
    pub norm: NormKind,
    pub branches: BranchFlags,
    pub ffm_ratio: usize,
    /// Classifier outputs; 0 means "number of training identities".
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            bottleneck_hidden: 256,
            norm: NormKind::Batch,
            branches: BranchFlags::default(),
            ffm_ratio: 8,
            num_classes: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.branches.validate()?;
        if self.bottleneck_hidden == 0 {
            return Err(config_err!("bottleneck_hidden must be positive"));
        }
        if self.branches.ffm && (self.ffm_ratio == 0 || self.branches.descriptor_dim() % self.ffm_ratio != 0) {
            return Err(config_err!(
                "ffm_ratio {} must divide the descriptor dimension {}",
                self.ffm_ratio,
                self.branches.descriptor_dim()
            ));
        }
        Ok(())
    }

    /// Named dimensions recorded in checkpoints and checked on load.
    pub fn dims(&self) -> std::collections::BTreeMap<String, usize> {
        let mut d = std::collections::BTreeMap::new();
        d.insert("backbone_channels".into(), self.backbone.channels());
        d.insert("bottleneck_hidden".into(), self.bottleneck_hidden);
        d.insert("embed".into(), EMBED_DIM);
        d.insert("gait_head".into(), HEAD_DIM);
        d.insert("descriptor".into(), self.branches.descriptor_dim());
        d.insert("num_classes".into(), self.num_classes);
        d
    }
}

#[derive(Debug, Default)]
pub struct Classifiers {
    pub global: Option<Linear>,
    pub foreground: Option<Linear>,
    pub gait_main: Option<Linear>,
    pub gait_mgp: Option<Linear>,
}

#[derive(Debug, Clone, Default)]
pub struct Logits {
    pub global: Option<Tensor>,
    pub foreground: Option<Tensor>,
    pub gait_main: Option<Tensor>,
    pub gait_mgp: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub appearance: Option<AppearanceFeatures>,
    pub gait: Option<GaitFeatures>,
    /// Ordered concatenation [global | foreground | gait] of the active branches.
    pub concat: Tensor,
    /// FFM output, or the concatenation when the FFM is disabled.
    pub fused: Tensor,
    pub logits: Logits,
}

impl ModelOutput {
    /// Retrieval descriptor.
    pub fn descriptor(&self) -> &Tensor {
        &self.fused
    }

    pub fn bundles(&self) -> Result<Vec<FeatureBundle>> {
        fn rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
            Ok(t.to_dtype(DType::F32)?.to_vec2()?)
        }
        fn opt_rows(t: Option<&Tensor>) -> Result<Option<Vec<Vec<f32>>>> {
            t.map(rows).transpose()
        }
        let n = self.fused.dim(0)?;
        let global = opt_rows(self.appearance.as_ref().map(|a| &a.global_512))?;
        let fg = opt_rows(self.appearance.as_ref().and_then(|a| a.foreground_512.as_ref()))?;
        let gait = opt_rows(self.gait.as_ref().map(|g| &g.inference_512))?;
        let main = opt_rows(self.gait.as_ref().map(|g| &g.main_256))?;
        let mgp = opt_rows(self.gait.as_ref().map(|g| &g.mgp_256))?;
        let concat = rows(&self.concat)?;
        let fused = rows(&self.fused)?;
        Ok((0..n)
            .map(|i| FeatureBundle {
                global_512: global.as_ref().map(|v| v[i].clone()),
                foreground_512: fg.as_ref().map(|v| v[i].clone()),
                gait_512: gait.as_ref().map(|v| v[i].clone()),
                gait_heads: main.as_ref().zip(mgp.as_ref()).map(|(a, b)| (a[i].clone(), b[i].clone())),
                concat: concat[i].clone(),
                fused: fused[i].clone(),
            })
            .collect())
    }
}

/// Per-sequence features of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub global_512: Option<Vec<f32>>,
    pub foreground_512: Option<Vec<f32>>,
    pub gait_512: Option<Vec<f32>>,
    pub gait_heads: Option<(Vec<f32>, Vec<f32>)>,
    pub concat: Vec<f32>,
    pub fused: Vec<f32>,
}

impl FeatureBundle {
    /// (global, foreground, gait, concat, fused) lengths; absent branches count 0.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let len = |v: &Option<Vec<f32>>| v.as_ref().map_or(0, Vec::len);
        (
            len(&self.global_512),
            len(&self.foreground_512),
            len(&self.gait_512),
            self.concat.len(),
            self.fused.len(),
        )
    }
}

/// The full three-module network.
#[derive(Debug)]
pub struct SeqMasksModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub appearance: Option<AppearanceNet>,
    pub gait: Option<GaitNet>,
    pub ffm: Option<Ffm>,
    pub classifiers: Classifiers,
}

impl SeqMasksModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let flags = config.branches;
        let appearance = if flags.appearance() {
            Some(AppearanceNet::new(
                &root,
                &config.backbone,
                config.bottleneck_hidden,
                config.norm,
                flags.foreground,
            )?)
        } else {
            None
        };
        let gait = if flags.gait { Some(GaitNet::new(&root)?) } else { None };
        let ffm = if flags.ffm {
            Some(Ffm::new(&root.pp("ffm"), flags.descriptor_dim(), config.ffm_ratio)?)
        } else {
            None
        };
        let mut classifiers = Classifiers::default();
        if config.num_classes >= 2 {
            let c = config.num_classes;
            let scope = root.pp("classifiers");
            if flags.global {
                classifiers.global = Some(Linear::new(&scope.pp("global"), EMBED_DIM, c, true)?);
            }
            if flags.foreground {
                classifiers.foreground = Some(Linear::new(&scope.pp("foreground"), EMBED_DIM, c, true)?);
            }
            if flags.gait {
                classifiers.gait_main = Some(Linear::new(&scope.pp("gait_main"), HEAD_DIM, c, true)?);
                classifiers.gait_mgp = Some(Linear::new(&scope.pp("gait_mgp"), HEAD_DIM, c, true)?);
            }
        }
        Ok(Self {
            config: config.clone(),
            store,
            appearance,
            gait,
            ffm,
            classifiers,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.config.branches.descriptor_dim()
    }

    /// frames (N, T, 3, H, W), masks (N, T, h, w), silhouettes (N, K, 64, 44).
    /// Inputs of inactive branches may be `None`.
    pub fn forward(
        &self,
        frames: Option<&Tensor>,
        masks: Option<&Tensor>,
        silhouettes: Option<&Tensor>,
        mode: Mode,
    ) -> Result<ModelOutput> {
        let appearance = match &self.appearance {
            Some(net) => {
                let (f, m) = frames
                    .zip(masks)
                    .ok_or_else(|| shape_err!("appearance branch active but no frames/masks given"))?;
                Some(net.forward(&self.cast(f)?, &self.cast(m)?, mode)?)
            }
            None => None,
        };
        let gait = match &self.gait {
            Some(net) => {
                let s = silhouettes.ok_or_else(|| shape_err!("gait branch active but no silhouettes given"))?;
                Some(net.forward(&self.cast(s)?)?)
            }
            None => None,
        };
        self.finish(appearance, gait, mode)
    }

    pub fn forward_batch(&self, batch: &TrainBatch, mode: Mode) -> Result<ModelOutput> {
        self.forward(
            Some(&batch.appearance_frames),
            Some(&batch.appearance_masks),
            Some(&batch.gait_masks),
            mode,
        )
    }

    fn cast(&self, t: &Tensor) -> Result<Tensor> {
        Ok(t.to_dtype(self.store.dtype())?)
    }

    /// Eval-mode embedding of one whole sequence: frames are pushed through the backbone in
    /// chunks and the per-frame pooled vectors averaged over all frames.
    /// frames (L, 3, H, W), masks (L, h, w), silhouettes (1, K, 64, 44).
    pub fn embed_sequence(
        &self,
        frames: Option<&Tensor>,
        masks: Option<&Tensor>,
        silhouettes: Option<&Tensor>,
        chunk: usize,
    ) -> Result<ModelOutput> {
        let len = match (&self.appearance, frames, masks) {
            (Some(_), Some(f), Some(m)) => {
                if m.dim(0)? != f.dim(0)? {
                    return Err(shape_err!("sequence needs one mask per frame"));
                }
                f.dim(0)?
            }
            (Some(_), _, _) => return Err(shape_err!("appearance branch active but no frames/masks given")),
            (None, _, _) => 0,
        };
        self.embed_streaming(
            len,
            |start, n| Ok((frames.unwrap().narrow(0, start, n)?, masks.unwrap().narrow(0, start, n)?)),
            silhouettes,
            chunk,
        )
    }

    /// Same as [`Self::embed_sequence`] but pulls `(frames, masks)` for `[start, start + n)`
    /// from `load` one chunk at a time, so a long sequence never sits in memory at once.
    pub fn embed_streaming(
        &self,
        len: usize,
        mut load: impl FnMut(usize, usize) -> Result<(Tensor, Tensor)>,
        silhouettes: Option<&Tensor>,
        chunk: usize,
    ) -> Result<ModelOutput> {
        if chunk == 0 {
            return Err(config_err!("chunk size must be positive"));
        }
        let appearance = match &self.appearance {
            Some(net) => {
                if len == 0 {
                    return Err(shape_err!("sequence needs at least one frame"));
                }
                let mut global: Option<Tensor> = None;
                let mut fg: Option<Tensor> = None;
                let mut start = 0;
                while start < len {
                    let n = chunk.min(len - start);
                    let (f, m) = load(start, n)?;
                    let v = net.frame_vectors(&self.cast(&f)?, &self.cast(&m)?, Mode::Eval)?;
                    let g = v.global.sum_keepdim(0)?;
                    global = Some(match global {
                        Some(acc) => (acc + g)?,
                        None => g,
                    });
                    if let Some(x) = v.foreground {
                        let x = x.sum_keepdim(0)?;
                        fg = Some(match fg {
                            Some(acc) => (acc + x)?,
                            None => x,
                        });
                    }
                    start += n;
                }
                let global = (global.unwrap() / len as f64)?;
                let fg = fg.map(|x| x / len as f64).transpose()?;
                Some(net.heads(global, fg, Mode::Eval)?)
            }
            None => None,
        };
        let gait = match &self.gait {
            Some(net) => {
                let s = silhouettes.ok_or_else(|| shape_err!("gait branch active but no silhouettes given"))?;
                Some(net.forward(&self.cast(s)?)?)
            }
            None => None,
        };
        self.finish(appearance, gait, Mode::Eval)
    }

    fn finish(
        &self,
        appearance: Option<AppearanceFeatures>,
        gait: Option<GaitFeatures>,
        mode: Mode,
    ) -> Result<ModelOutput> {
        let mut parts: Vec<&Tensor> = Vec::new();
        if let Some(a) = &appearance {
            parts.push(&a.global_512);
            if let Some(f) = &a.foreground_512 {
                parts.push(f);
            }
        }
        if let Some(g) = &gait {
            parts.push(&g.inference_512);
        }
        let concat = Tensor::cat(&parts, 1)?;
        let fused = match &self.ffm {
            Some(ffm) => ffm.forward(&concat)?,
            None => concat.clone(),
        };
        let mut logits = Logits::default();
        if mode.is_train() {
            let apply = |l: &Option<Linear>, x: Option<&Tensor>| -> Result<Option<Tensor>> {
                match (l, x) {
                    (Some(l), Some(x)) => Ok(Some(l.forward(x)?)),
                    _ => Ok(None),
                }
            };
            let c = &self.classifiers;
            logits.global = apply(&c.global, appearance.as_ref().map(|a| &a.global_512))?;
            logits.foreground = apply(&c.foreground, appearance.as_ref().and_then(|a| a.foreground_512.as_ref()))?;
            logits.gait_main = apply(&c.gait_main, gait.as_ref().map(|g| &g.main_256))?;
            logits.gait_mgp = apply(&c.gait_mgp, gait.as_ref().map(|g| &g.mgp_256))?;
        }
        Ok(ModelOutput {
            appearance,
            gait,
            concat,
            fused,
            logits,
        })
    }

    /// Groups that hold at least one tensor in this model.
    pub fn active_groups(&self) -> Vec<String> {
        let present = self.store.groups();
        GROUPS
            .iter()
            .filter(|g| present.iter().any(|p| p == *g))
            .map(|g| g.to_string())
            .collect()
    }

    /// Final gait stage channel count, exposed for diagnostics.
    pub fn gait_channels(&self) -> usize {
        STAGE_CHANNELS[2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn zero_ffm(store: &ParamStore, dim: usize) -> Ffm {
        let ffm = Ffm::new(&store.root().pp("ffm"), dim, 8).unwrap();
        for v in [&ffm.fc1.weight, ffm.fc1.bias.as_ref().unwrap(), &ffm.fc2.weight, ffm.fc2.bias.as_ref().unwrap()] {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        ffm
    }

    #[test]
    fn zeroed_ffm_scales_by_one_and_a_half() {
        let store = ParamStore::new(0, DType::F32);
        let ffm = zero_ffm(&store, 1536);
        let x = random(&[4, 1536], 1, DType::F32);
        let y = ffm.forward(&x).unwrap();
        let d = (y - (&x * 1.5).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() < 1e-7);
        assert_eq!(ffm.fc1.out_dim(), 192);
    }

    #[test]
    fn ffm_of_zero_is_zero() {
        let store = ParamStore::new(0, DType::F32);
        let ffm = Ffm::new(&store.root().pp("ffm"), 64, 8).unwrap();
        let z = Tensor::zeros((2, 64), DType::F32, &Device::Cpu).unwrap();
        let y = ffm.forward(&z).unwrap();
        assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn ffm_matches_matrix_oracle_and_gate_bounds() {
        let store = ParamStore::new(2, DType::F64);
        let ffm = Ffm::new(&store.root().pp("ffm"), 16, 8).unwrap();
        let x = random(&[3, 16], 3, DType::F64);
        let y: Vec<Vec<f64>> = ffm.forward(&x).unwrap().to_vec2().unwrap();
        let w1: Vec<Vec<f64>> = ffm.fc1.weight.to_vec2().unwrap();
        let b1: Vec<f64> = ffm.fc1.bias.as_ref().unwrap().to_vec1().unwrap();
        let w2: Vec<Vec<f64>> = ffm.fc2.weight.to_vec2().unwrap();
        let b2: Vec<f64> = ffm.fc2.bias.as_ref().unwrap().to_vec1().unwrap();
        let xs: Vec<Vec<f64>> = x.to_vec2().unwrap();
        for (row, out) in xs.iter().zip(&y) {
            let h: Vec<f64> = (0..2)
                .map(|j| (b1[j] + (0..16).map(|i| w1[j][i] * row[i]).sum::<f64>()).max(0.0))
                .collect();
            for i in 0..16 {
                let g = 1.0 / (1.0 + (-(b2[i] + w2[i][0] * h[0] + w2[i][1] * h[1])).exp());
                assert!(g > 0.0 && g < 1.0);
                assert!((out[i] - row[i] * (1.0 + g)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ffm_gradient_matches_finite_differences() {
        let store = ParamStore::new(4, DType::F64);
        let ffm = Ffm::new(&store.root().pp("ffm"), 8, 4).unwrap();
        let x0 = random(&[2, 8], 5, DType::F64);
        let probe = random(&[2, 8], 6, DType::F64);
        let f = |x: &Tensor| (ffm.forward(x).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let var = Var::from_tensor(&x0).unwrap();
        let loss = (ffm.forward(var.as_tensor()).unwrap() * &probe).unwrap().sum_all().unwrap();
        let grad: Vec<f64> = loss.backward().unwrap().get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..base.len() {
            let eps = 1e-6;
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            let numeric = (f(&Tensor::from_vec(p, x0.shape(), &Device::Cpu).unwrap())
                - f(&Tensor::from_vec(m, x0.shape(), &Device::Cpu).unwrap()))
                / (2.0 * eps);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-3);
        }
    }

    #[test]
    fn variant_flags_and_parse() {
        let dims: Vec<usize> = Variant::ALL.iter().map(|v| v.flags().descriptor_dim()).collect();
        assert_eq!(dims, vec![1024, 1024, 1536, 1536]);
        assert_eq!("agfusion".parse::<Variant>().unwrap(), Variant::AGFusion);
        assert!("XXFusion".parse::<Variant>().is_err());
        let bad = BranchFlags {
            global: false,
            foreground: true,
            gait: true,
            ffm: false,
        };
        assert!(bad.validate().is_err());
    }

    fn desk_config(variant: Variant, classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::Reference { channels: 16 },
            bottleneck_hidden: 32,
            branches: variant.flags(),
            num_classes: classes,
            ..Default::default()
        }
    }

    fn inputs(n: usize, t: usize, k: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let frames = random(&[n, t, 3, 64, 32], seed, DType::F32);
        let masks = random(&[n, t, 4, 2], seed + 1, DType::F32).abs().unwrap();
        let sil = random(&[n, k, 64, 44], seed + 2, DType::F32).abs().unwrap();
        (frames, masks, sil)
    }

    #[test]
    fn dimension_contract_for_every_variant() {
        for v in Variant::ALL {
            let model = SeqMasksModel::new(&desk_config(v, 3), 0, DType::F32).unwrap();
            let (f, m, s) = inputs(2, 2, 2, 7);
            let out = model.forward(Some(&f), Some(&m), Some(&s), Mode::Train).unwrap();
            let b = out.bundles().unwrap();
            assert_eq!(b.len(), 2);
            let d = v.flags().descriptor_dim();
            let fg = if v.flags().foreground { 512 } else { 0 };
            assert_eq!(b[0].dims(), (512, fg, 512, d, d));
            assert!(out.logits.global.is_some() && out.logits.gait_mgp.is_some());
            assert_eq!(out.logits.foreground.is_some(), v.flags().foreground);
            assert_eq!(model.active_groups().contains(&"ffm".to_string()), v.flags().ffm);
        }
    }

    #[test]
    fn eval_duplicates_and_gait_permutation() {
        let model = SeqMasksModel::new(&desk_config(Variant::AGFusion, 0), 1, DType::F32).unwrap();
        let (f, m, s) = inputs(1, 2, 3, 8);
        let f2 = Tensor::cat(&[&f, &f], 0).unwrap();
        let m2 = Tensor::cat(&[&m, &m], 0).unwrap();
        let s2 = Tensor::cat(&[&s, &s], 0).unwrap();
        let out = model.forward(Some(&f2), Some(&m2), Some(&s2), Mode::Eval).unwrap();
        let b = out.bundles().unwrap();
        assert_eq!(b[0], b[1]);
        assert!(out.logits.global.is_none());
        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let sp = s.index_select(&perm, 1).unwrap();
        let a = model.forward(Some(&f), Some(&m), Some(&s), Mode::Eval).unwrap();
        let p = model.forward(Some(&f), Some(&m), Some(&sp), Mode::Eval).unwrap();
        let d = (a.fused - p.fused).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-6);
    }

    #[test]
    fn removing_ffm_changes_descriptor() {
        let with = SeqMasksModel::new(&desk_config(Variant::GGFusion, 0), 3, DType::F32).unwrap();
        let (f, m, s) = inputs(1, 1, 2, 9);
        let out = with.forward(Some(&f), Some(&m), Some(&s), Mode::Eval).unwrap();
        let d = (&out.fused - &out.concat).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() > 0.0);
    }

    #[test]
    fn chunked_embedding_matches_single_chunk() {
        let model = SeqMasksModel::new(&desk_config(Variant::AGFusion, 0), 5, DType::F32).unwrap();
        let (f, m, s) = inputs(1, 8, 4, 10);
        let frames = f.squeeze(0).unwrap();
        let masks = m.squeeze(0).unwrap();
        let one = model.embed_sequence(Some(&frames), Some(&masks), Some(&s), 32).unwrap();
        let two = model.embed_sequence(Some(&frames), Some(&masks), Some(&s), 4).unwrap();
        let d = (&one.fused - &two.fused).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() < 1e-5);
        let again = model.embed_sequence(Some(&frames), Some(&masks), Some(&s), 4).unwrap();
        assert_eq!(again.bundles().unwrap(), two.bundles().unwrap());
    }
}
