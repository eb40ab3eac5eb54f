//! Set-based gait network over aligned silhouettes with a multilayer global pipeline.

use candle_core::{Tensor, D};

use crate::dataset::{ALIGNED_SIZE, SILHOUETTE_WIDTH};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{leaky_relu, sigmoid, Conv2d, Linear, Scope};

pub const STAGE_CHANNELS: [usize; 3] = [32, 64, 128];
pub const HEAD_DIM: usize = 256;
const SLOPE: f64 = 0.01;

/// Permutation-invariant set aggregation with an attention gate and a residual on the max.
#[derive(Debug)]
pub struct SetPool {
    pub fuse: Conv2d,
}

impl SetPool {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            fuse: Conv2d::new(&scope.pp("fuse"), 3 * channels, channels, 1, 1, 0, true)?,
        })
    }

    /// (N, K, C, H, W) -> (max, mean, median), each (N, C, H, W). Median is the lower one.
    pub fn statistics(x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (_n, k, _c, _h, _w) = x.dims5()?;
        if k == 0 {
            return Err(invalid!("set pooling needs at least one element"));
        }
        let sorted = x.permute((0, 2, 3, 4, 1))?.contiguous()?.sort_last_dim(true)?.0;
        let max = sorted.narrow(D::Minus1, k - 1, 1)?.squeeze(D::Minus1)?;
        let median = sorted.narrow(D::Minus1, (k - 1) / 2, 1)?.squeeze(D::Minus1)?;
        // summing in sorted order keeps the mean independent of input order
        let mean = (sorted.sum(D::Minus1)? / k as f64)?;
        Ok((max, mean, median))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (max, mean, median) = Self::statistics(x)?;
        let stats = Tensor::cat(&[&max, &mean, &median], 1)?;
        let gate = sigmoid(&self.fuse.forward(&stats)?)?;
        Ok((&max + (&max * gate)?)?)
    }
}

/// Two 3×3 convs with leaky ReLU, optionally followed by 2×2 max pooling.
#[derive(Debug)]
pub struct ConvStage {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub pool: bool,
}

impl ConvStage {
    fn new(scope: &Scope, cin: usize, cout: usize, first_kernel: usize, pool: bool) -> Result<Self> {
        Ok(Self {
            conv_a: Conv2d::new(&scope.pp("conv_a"), cin, cout, first_kernel, 1, first_kernel / 2, false)?,
            conv_b: Conv2d::new(&scope.pp("conv_b"), cout, cout, 3, 1, 1, false)?,
            pool,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = leaky_relu(&self.conv_a.forward(x)?, SLOPE)?;
        let y = leaky_relu(&self.conv_b.forward(&y)?, SLOPE)?;
        Ok(if self.pool { y.max_pool2d(2)? } else { y })
    }
}

/// Per-frame stage maps, each (N·K, C, H, W).
#[derive(Debug, Clone)]
pub struct GaitStageMaps {
    pub stage1: Tensor,
    pub stage2: Tensor,
    pub stage3: Tensor,
}

#[derive(Debug)]
pub struct FrameEncoder {
    pub stages: [ConvStage; 3],
}

impl FrameEncoder {
    pub fn new(scope: &Scope) -> Result<Self> {
        let [c1, c2, c3] = STAGE_CHANNELS;
        Ok(Self {
            stages: [
                ConvStage::new(&scope.pp("stage1"), 1, c1, 5, true)?,
                ConvStage::new(&scope.pp("stage2"), c1, c2, 3, true)?,
                ConvStage::new(&scope.pp("stage3"), c2, c3, 3, false)?,
            ],
        })
    }

    /// masks (B, 1, 64, 44).
    pub fn forward(&self, masks: &Tensor) -> Result<GaitStageMaps> {
        let dims = masks.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[2] != ALIGNED_SIZE || dims[3] != SILHOUETTE_WIDTH {
            return Err(shape_err!(
                "gait encoder expects (B, 1, {ALIGNED_SIZE}, {SILHOUETTE_WIDTH}), got {dims:?}"
            ));
        }
        let stage1 = self.stages[0].forward(masks)?;
        let stage2 = self.stages[1].forward(&stage1)?;
        let stage3 = self.stages[2].forward(&stage2)?;
        Ok(GaitStageMaps { stage1, stage2, stage3 })
    }
}

/// Mirrors stages 2 and 3 with its own parameters: sp1 → stage2 → +sp2 → stage3 → +sp3.
#[derive(Debug)]
pub struct Mgp {
    pub stage2: ConvStage,
    pub stage3: ConvStage,
}

impl Mgp {
    pub fn new(scope: &Scope) -> Result<Self> {
        let [c1, c2, c3] = STAGE_CHANNELS;
        Ok(Self {
            stage2: ConvStage::new(&scope.pp("stage2"), c1, c2, 3, true)?,
            stage3: ConvStage::new(&scope.pp("stage3"), c2, c3, 3, false)?,
        })
    }

    pub fn forward(&self, sp1: &Tensor, sp2: &Tensor, sp3: &Tensor) -> Result<Tensor> {
        let x = self.stage2.forward(sp1)?;
        if x.dims() != sp2.dims() {
            return Err(shape_err!("MGP stage 2 output {:?} vs set feature {:?}", x.dims(), sp2.dims()));
        }
        let x = self.stage3.forward(&(x + sp2)?)?;
        if x.dims() != sp3.dims() {
            return Err(shape_err!("MGP stage 3 output {:?} vs set feature {:?}", x.dims(), sp3.dims()));
        }
        Ok((x + sp3)?)
    }
}

/// (N, C, H, W) -> (N, C): spatial mean plus spatial max.
pub fn global_pool(map: &Tensor) -> Result<Tensor> {
    let flat = map.flatten_from(2)?;
    Ok((flat.mean(D::Minus1)? + flat.max(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
pub struct GaitFeatures {
    pub main_128: Tensor,
    pub mgp_128: Tensor,
    pub main_256: Tensor,
    pub mgp_256: Tensor,
    pub inference_512: Tensor,
}

#[derive(Debug)]
pub struct GaitHeads {
    pub main: Linear,
    pub mgp: Linear,
}

impl GaitHeads {
    pub fn new(scope: &Scope) -> Result<Self> {
        Ok(Self {
            main: Linear::new(&scope.pp("main"), STAGE_CHANNELS[2], HEAD_DIM, true)?,
            mgp: Linear::new(&scope.pp("mgp"), STAGE_CHANNELS[2], HEAD_DIM, true)?,
        })
    }

    pub fn forward(&self, main_128: Tensor, mgp_128: Tensor) -> Result<GaitFeatures> {
        let main_256 = self.main.forward(&main_128)?;
        let mgp_256 = self.mgp.forward(&mgp_128)?;
        let inference_512 = Tensor::cat(&[&main_256, &mgp_256], 1)?;
        Ok(GaitFeatures {
            main_128,
            mgp_128,
            main_256,
            mgp_256,
            inference_512,
        })
    }
}

#[derive(Debug)]
pub struct GaitNet {
    pub encoder: FrameEncoder,
    pub set_pools: [SetPool; 3],
    pub mgp: Mgp,
    pub heads: GaitHeads,
}

impl GaitNet {
    /// Registers parameters under the `gait_main`, `gait_mgp` and `gait_heads` groups.
    pub fn new(root: &Scope) -> Result<Self> {
        let main = root.pp("gait_main");
        let [c1, c2, c3] = STAGE_CHANNELS;
        Ok(Self {
            encoder: FrameEncoder::new(&main.pp("encoder"))?,
            set_pools: [
                SetPool::new(&main.pp("set_pool1"), c1)?,
                SetPool::new(&main.pp("set_pool2"), c2)?,
                SetPool::new(&main.pp("set_pool3"), c3)?,
            ],
            mgp: Mgp::new(&root.pp("gait_mgp"))?,
            heads: GaitHeads::new(&root.pp("gait_heads"))?,
        })
    }

    /// masks (N, K, 64, 44) -> features for N sets.
    pub fn forward(&self, masks: &Tensor) -> Result<GaitFeatures> {
        let dims = masks.dims();
        if dims.len() != 4 {
            return Err(shape_err!("gait input must be (N, K, 64, 44), got {dims:?}"));
        }
        let (n, k) = (dims[0], dims[1]);
        if k == 0 {
            return Err(invalid!("gait set needs K ≥ 1 silhouettes"));
        }
        let maps = self.encoder.forward(&masks.reshape((n * k, 1, dims[2], dims[3]))?)?;
        let unflatten = |t: &Tensor| -> Result<Tensor> {
            let (_, c, h, w) = t.dims4()?;
            Ok(t.reshape((n, k, c, h, w))?)
        };
        let sp1 = self.set_pools[0].forward(&unflatten(&maps.stage1)?)?;
        let sp2 = self.set_pools[1].forward(&unflatten(&maps.stage2)?)?;
        let sp3 = self.set_pools[2].forward(&unflatten(&maps.stage3)?)?;
        let mgp = self.mgp.forward(&sp1, &sp2, &sp3)?;
        self.heads.forward(global_pool(&sp3)?, global_pool(&mgp)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn singleton_set_pool() {
        let store = ParamStore::new(0, DType::F64);
        let sp = SetPool::new(&store.root().pp("sp"), 2).unwrap();
        let f = random(&[1, 1, 2, 3, 3], 1, DType::F64);
        let out = sp.forward(&f).unwrap();
        let frame = f.squeeze(1).unwrap();
        let stats = Tensor::cat(&[&frame, &frame, &frame], 1).unwrap();
        let gate = sigmoid(&sp.fuse.forward(&stats).unwrap()).unwrap();
        let expected = (&frame + (&frame * gate).unwrap()).unwrap();
        assert!(max_diff(&out, &expected) < 1e-12);
    }

    #[test]
    fn statistics_match_elementwise_oracle() {
        let x = random(&[1, 3, 2, 2, 2], 2, DType::F64);
        let (max, mean, median) = SetPool::statistics(&x).unwrap();
        let frames: Vec<Vec<f64>> = (0..3)
            .map(|k| x.get(0).unwrap().get(k).unwrap().flatten_all().unwrap().to_vec1().unwrap())
            .collect();
        let max: Vec<f64> = max.flatten_all().unwrap().to_vec1().unwrap();
        let mean: Vec<f64> = mean.flatten_all().unwrap().to_vec1().unwrap();
        let median: Vec<f64> = median.flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..8 {
            let mut v: Vec<f64> = frames.iter().map(|f| f[i]).collect();
            v.sort_by(f64::total_cmp);
            assert!((max[i] - v[2]).abs() < 1e-6);
            assert!((median[i] - v[1]).abs() < 1e-6);
            assert!((mean[i] - v.iter().sum::<f64>() / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn even_set_uses_lower_median() {
        let x = Tensor::new(&[4f64, 1.0, 3.0, 2.0], &Device::Cpu).unwrap().reshape((1, 4, 1, 1, 1)).unwrap();
        let (_, _, median) = SetPool::statistics(&x).unwrap();
        assert_eq!(median.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.0]);
    }

    #[test]
    fn empty_set_is_invalid_input() {
        let x = Tensor::zeros((1, 0, 2, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(SetPool::statistics(&x), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn set_pool_gradient_matches_finite_differences() {
        let store = ParamStore::new(3, DType::F64);
        let sp = SetPool::new(&store.root().pp("sp"), 2).unwrap();
        let x0 = random(&[1, 2, 2, 2, 2], 4, DType::F64);
        let probe = random(&[1, 2, 2, 2], 5, DType::F64);
        let f = |x: &Tensor| -> f64 {
            (sp.forward(x).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let var = Var::from_tensor(&x0).unwrap();
        let loss = (sp.forward(var.as_tensor()).unwrap() * &probe).unwrap().sum_all().unwrap();
        let grad: Vec<f64> = loss.backward().unwrap().get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            let numeric = (f(&Tensor::from_vec(p, x0.shape(), &Device::Cpu).unwrap())
                - f(&Tensor::from_vec(m, x0.shape(), &Device::Cpu).unwrap()))
                / (2.0 * eps);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "{i}: {numeric} vs {}", grad[i]);
        }
    }

    #[test]
    fn encoder_shapes_and_zero_input() {
        let store = ParamStore::new(0, DType::F32);
        let enc = FrameEncoder::new(&store.root().pp("gait_main").pp("encoder")).unwrap();
        let z = Tensor::zeros((2, 1, 64, 44), DType::F32, &Device::Cpu).unwrap();
        let maps = enc.forward(&z).unwrap();
        assert_eq!(maps.stage1.dims(), &[2, 32, 32, 22]);
        assert_eq!(maps.stage2.dims(), &[2, 64, 16, 11]);
        assert_eq!(maps.stage3.dims(), &[2, 128, 16, 11]);
        for m in [&maps.stage1, &maps.stage2, &maps.stage3] {
            assert_eq!(m.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
        let bad = Tensor::zeros((1, 1, 64, 40), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&bad), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn identical_frames_identical_maps() {
        let store = ParamStore::new(0, DType::F32);
        let enc = FrameEncoder::new(&store.root().pp("e")).unwrap();
        let f = random(&[1, 1, 64, 44], 6, DType::F32).abs().unwrap();
        let maps = enc.forward(&Tensor::cat(&[&f, &f], 0).unwrap()).unwrap();
        assert_eq!(max_diff(&maps.stage3.get(0).unwrap(), &maps.stage3.get(1).unwrap()), 0.0);
    }

    #[test]
    fn mgp_zero_and_liveness() {
        let store = ParamStore::new(0, DType::F32);
        let net = GaitNet::new(&store.root()).unwrap();
        let sp1 = Tensor::zeros((1, 32, 32, 22), DType::F32, &Device::Cpu).unwrap();
        let sp2 = Tensor::zeros((1, 64, 16, 11), DType::F32, &Device::Cpu).unwrap();
        let sp3 = Tensor::zeros((1, 128, 16, 11), DType::F32, &Device::Cpu).unwrap();
        let out = net.mgp.forward(&sp1, &sp2, &sp3).unwrap();
        assert_eq!(out.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);

        let sp1 = random(&[1, 32, 32, 22], 7, DType::F32);
        let sp2 = random(&[1, 64, 16, 11], 8, DType::F32);
        let sp3 = random(&[1, 128, 16, 11], 9, DType::F32);
        let base = net.mgp.forward(&sp1, &sp2, &sp3).unwrap();
        let no2 = net.mgp.forward(&sp1, &sp2.zeros_like().unwrap(), &sp3).unwrap();
        let no1 = net.mgp.forward(&sp1.zeros_like().unwrap(), &sp2, &sp3).unwrap();
        assert!(max_diff(&base, &no2) > 0.0);
        assert!(max_diff(&base, &no1) > 0.0);
        assert!(net.mgp.forward(&sp1, &sp3, &sp3).is_err());
    }

    #[test]
    fn mgp_parameters_are_distinct_from_main() {
        let store = ParamStore::new(0, DType::F32);
        let net = GaitNet::new(&store.root()).unwrap();
        let main = net.encoder.stages[1].conv_a.weight.as_tensor();
        let mgp = net.mgp.stage2.conv_a.weight.as_tensor();
        assert_ne!(main.id(), mgp.id());
        assert!(max_diff(main, mgp) > 0.0);
        assert!(store.groups().contains(&"gait_mgp".to_string()));
    }

    #[test]
    fn global_pool_examples() {
        let c = (Tensor::ones((1, 2, 3, 3), DType::F64, &Device::Cpu).unwrap() * 1.5).unwrap();
        assert_eq!(global_pool(&c).unwrap().to_vec2::<f64>().unwrap(), vec![vec![3.0, 3.0]]);
        let mut v = vec![0f64; 6];
        v[4] = 2.0;
        let m = Tensor::from_vec(v, (1, 1, 2, 3), &Device::Cpu).unwrap();
        let out = global_pool(&m).unwrap().to_vec2::<f64>().unwrap()[0][0];
        assert!((out - (2.0 / 6.0 + 2.0)).abs() < 1e-12);
        let r = random(&[2, 3, 4, 5], 10, DType::F64);
        let g: Vec<Vec<f64>> = global_pool(&r).unwrap().to_vec2().unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let cells: Vec<f64> = r.get(n).unwrap().get(c).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                let mean = cells.iter().sum::<f64>() / cells.len() as f64;
                let max = cells.iter().cloned().fold(f64::MIN, f64::max);
                assert!((g[n][c] - mean - max).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn heads_layout_and_zero() {
        let store = ParamStore::new(0, DType::F32);
        let heads = GaitHeads::new(&store.root().pp("gait_heads")).unwrap();
        let z = Tensor::zeros((1, 128), DType::F32, &Device::Cpu).unwrap();
        let f = heads.forward(z.clone(), z.clone()).unwrap();
        assert_eq!(f.main_256.dims(), &[1, 256]);
        assert_eq!(f.mgp_256.dims(), &[1, 256]);
        assert_eq!(f.inference_512.dims(), &[1, 512]);
        assert_eq!(f.inference_512.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);

        let a = random(&[1, 128], 11, DType::F32);
        let b = random(&[1, 128], 12, DType::F32);
        let f = heads.forward(a.clone(), b.clone()).unwrap();
        assert_eq!(max_diff(&f.inference_512.narrow(1, 0, 256).unwrap(), &f.main_256), 0.0);
        assert_eq!(max_diff(&f.inference_512.narrow(1, 256, 256).unwrap(), &f.mgp_256), 0.0);
        let swapped = GaitHeads {
            main: heads.mgp.clone(),
            mgp: heads.main.clone(),
        };
        let g = swapped.forward(b, a).unwrap();
        assert_eq!(max_diff(&g.inference_512.narrow(1, 0, 256).unwrap(), &f.mgp_256), 0.0);
    }

    #[test]
    fn heads_only_receive_their_own_gradients() {
        let store = ParamStore::new(0, DType::F32);
        let net = GaitNet::new(&store.root()).unwrap();
        let x = random(&[1, 2, 64, 44], 13, DType::F32).abs().unwrap();
        let f = net.forward(&x).unwrap();
        let grads = f.main_256.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(net.heads.main.weight.as_tensor()).is_some());
        let mgp_grad = grads.get(net.heads.mgp.weight.as_tensor());
        assert!(mgp_grad.is_none_or(|g| g.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() == 0.0));
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        let store = ParamStore::new(4, DType::F32);
        let net = GaitNet::new(&store.root()).unwrap();
        let x = random(&[1, 4, 64, 44], 14, DType::F32).abs().unwrap();
        let base = net.forward(&x).unwrap().inference_512;
        let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let px = x.index_select(&perm, 1).unwrap();
        assert_eq!(max_diff(&base, &net.forward(&px).unwrap().inference_512), 0.0);
        let dup = Tensor::cat(&[&x, &x], 1).unwrap();
        assert!(max_diff(&base, &net.forward(&dup).unwrap().inference_512) < 1e-5);
        let one = net.forward(&x.narrow(1, 0, 1).unwrap()).unwrap().inference_512;
        assert_eq!(one.dims(), &[1, 512]);
        assert!(one.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }
}
