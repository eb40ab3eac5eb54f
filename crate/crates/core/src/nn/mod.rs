//! Minimal layer toolkit on top of candle: a named parameter store with seeded
//! initialization, and the handful of layers the networks need.

pub mod conv;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Debug)]
struct Entry {
    var: Var,
    trainable: bool,
}

#[derive(Debug)]
struct StoreInner {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter registry. Names are dot-separated; the first segment is the
/// parameter group used by checkpoints and optimizers.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                entries: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if inner.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Uniform(bound) => (0..count)
                .map(|_| inner.rng.random_range(-bound..=bound))
                .collect(),
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        inner.entries.insert(
            name,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().unwrap().entries.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().entries.get(name).map(|e| e.var.clone())
    }

    /// Trainable variables whose group (first name segment) satisfies `filter`.
    pub fn trainable_vars(&self, filter: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .entries
            .iter()
            .filter(|(name, e)| e.trainable && filter(group_of(name)))
            .map(|(name, e)| (name.clone(), e.var.clone()))
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .entries
            .iter()
            .map(|(name, e)| (name.clone(), e.var.clone()))
            .collect()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self
            .names()
            .iter()
            .map(|n| group_of(n).to_string())
            .collect();
        groups.dedup();
        groups
    }

    pub fn parameter_count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.trainable_vars(filter)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Snapshot of every tensor (parameters and buffers), detached.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.all()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites stored values. Every provided tensor must name an existing entry of the
    /// same shape; shape errors name the offending group.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        for (name, t) in tensors {
            let entry = inner.entries.get(name).ok_or_else(|| Error::Checkpoint {
                component: group_of(name).to_string(),
                reason: format!("unknown tensor `{name}`"),
            })?;
            if entry.var.dims() != t.dims() {
                return Err(Error::Checkpoint {
                    component: group_of(name).to_string(),
                    reason: format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        t.dims(),
                        entry.var.dims()
                    ),
                });
            }
        }
        for (name, t) in tensors {
            let entry = &inner.entries[name];
            entry.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// A prefix into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, segment: impl AsRef<str>) -> Scope {
        let prefix = if self.prefix.is_empty() {
            segment.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, segment.as_ref())
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn param(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.name(leaf), shape, init, true)
    }

    pub fn buffer(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.name(leaf), shape, init, false)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = scope.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        let bias = if bias {
            Some(scope.param("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x`: (N, in) -> (N, out).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        // He-uniform for ReLU-family activations.
        let bound = (6.0 / fan_in).sqrt();
        let weight = scope.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Uniform(bound))?;
        let bias = if bias {
            Some(scope.param("bias", &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv::conv2d(
            x,
            self.weight.as_tensor(),
            self.bias.as_ref().map(|b| b.as_tensor()),
            self.stride,
            self.padding,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Batch,
    Layer,
}

/// Batch normalization over dim 1 of (N, C) or (N, C, H, W) inputs, or layer normalization
/// over the feature dimension of (N, C) inputs.
#[derive(Debug, Clone)]
pub struct Norm {
    kind: NormKind,
    gamma: Option<Var>,
    beta: Option<Var>,
    running_mean: Option<Var>,
    running_var: Option<Var>,
    momentum: f64,
    eps: f64,
}

impl Norm {
    pub fn new(scope: &Scope, kind: NormKind, channels: usize, affine: bool) -> Result<Self> {
        let (gamma, beta) = if affine {
            (
                Some(scope.param("weight", &[channels], Init::Ones)?),
                Some(scope.param("bias", &[channels], Init::Zeros)?),
            )
        } else {
            (None, None)
        };
        let (running_mean, running_var) = match kind {
            NormKind::Batch => (
                Some(scope.buffer("running_mean", &[channels], Init::Zeros)?),
                Some(scope.buffer("running_var", &[channels], Init::Ones)?),
            ),
            NormKind::Layer => (None, None),
        };
        Ok(Self {
            kind,
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let rank = x.rank();
        if rank != 2 && rank != 4 {
            return Err(Error::Shape(format!("norm expects rank 2 or 4, got {:?}", x.dims())));
        }
        let channels = x.dims()[1];
        // (1, C) or (1, C, 1, 1)
        let bshape: Vec<usize> = if rank == 2 {
            vec![1, channels]
        } else {
            vec![1, channels, 1, 1]
        };
        let normalized = match self.kind {
            NormKind::Layer => {
                if rank != 2 {
                    return Err(Error::Shape("layer norm supports (N, C) inputs only".into()));
                }
                let mean = x.mean_keepdim(D::Minus1)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
                centered.broadcast_div(&(var + self.eps)?.sqrt()?)?
            }
            NormKind::Batch => {
                let running_mean = self.running_mean.as_ref().unwrap();
                let running_var = self.running_var.as_ref().unwrap();
                if mode.is_train() {
                    let (flat, count) = flatten_channels(x)?;
                    let mean = flat.mean_keepdim(0)?;
                    let centered = flat.broadcast_sub(&mean)?;
                    let var = centered.sqr()?.mean_keepdim(0)?;
                    let unbiased = if count > 1 {
                        (&var * (count as f64 / (count - 1) as f64))?
                    } else {
                        var.clone()
                    };
                    let m = self.momentum;
                    running_mean.set(
                        &((running_mean.as_tensor() * (1.0 - m))?
                            + (mean.detach().flatten_all()? * m)?)?,
                    )?;
                    running_var.set(
                        &((running_var.as_tensor() * (1.0 - m))?
                            + (unbiased.detach().flatten_all()? * m)?)?,
                    )?;
                    let mean = mean.reshape(bshape.as_slice())?;
                    let var = var.reshape(bshape.as_slice())?;
                    x.broadcast_sub(&mean)?
                        .broadcast_div(&(var + self.eps)?.sqrt()?)?
                } else {
                    let mean = running_mean.as_tensor().reshape(bshape.as_slice())?;
                    let std = (running_var.as_tensor() + self.eps)?
                        .sqrt()?
                        .reshape(bshape.as_slice())?;
                    x.broadcast_sub(&mean)?.broadcast_div(&std)?
                }
            }
        };
        match (&self.gamma, &self.beta) {
            (Some(g), Some(b)) => Ok(normalized
                .broadcast_mul(&g.as_tensor().reshape(bshape.as_slice())?)?
                .broadcast_add(&b.as_tensor().reshape(bshape.as_slice())?)?),
            _ => Ok(normalized),
        }
    }
}

/// (N, C[, H, W]) -> (N·H·W, C) plus the row count.
fn flatten_channels(x: &Tensor) -> Result<(Tensor, usize)> {
    if x.rank() == 2 {
        return Ok((x.clone(), x.dims()[0]));
    }
    let (n, c, h, w) = x.dims4()?;
    let flat = x.permute((0, 2, 3, 1))?.reshape((n * h * w, c))?;
    Ok((flat, n * h * w))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, slope·x) for slope in (0, 1)
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ParamStore::new(7, DType::F32);
        let b = ParamStore::new(7, DType::F32);
        let la = Linear::new(&a.root().pp("head"), 4, 3, true).unwrap();
        let lb = Linear::new(&b.root().pp("head"), 4, 3, true).unwrap();
        let va: Vec<f32> = la.weight.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = lb.weight.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.names(), vec!["head.bias".to_string(), "head.weight".to_string()]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::new(0, DType::F32);
        Linear::new(&s.root().pp("x"), 2, 2, false).unwrap();
        assert!(Linear::new(&s.root().pp("x"), 2, 2, false).is_err());
    }

    #[test]
    fn batch_norm_train_then_eval() {
        let s = ParamStore::new(0, DType::F64);
        let bn = Norm::new(&s.root().pp("bn"), NormKind::Batch, 3, false).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [3.0, 2.0, 1.0]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let col0: Vec<f64> = y.narrow(1, 0, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!((col0[0] + 1.0).abs() < 1e-4 && (col0[1] - 1.0).abs() < 1e-4);
        // running stats moved towards the batch stats
        let rm: Vec<f64> = s.get("bn.running_mean").unwrap().to_vec1().unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12);
        let zeros = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let z = bn.forward(&zeros, Mode::Eval).unwrap();
        assert!(z.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap().is_finite());
    }

    #[test]
    fn load_rejects_shape_mismatch_with_group_name() {
        let s = ParamStore::new(0, DType::F32);
        Linear::new(&s.root().pp("ffm").pp("fc1"), 4, 2, true).unwrap();
        let mut bad = BTreeMap::new();
        bad.insert(
            "ffm.fc1.weight".to_string(),
            Tensor::zeros((3, 3), DType::F32, &Device::Cpu).unwrap(),
        );
        match s.load(&bad) {
            Err(Error::Checkpoint { component, .. }) => assert_eq!(component, "ffm"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
