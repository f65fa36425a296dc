//! Seeded parameter storage and the handful of layers the models share.
//!
//! Candle seeds its CPU random source from the thread RNG, so every weight
//! here is drawn from a ChaCha stream keyed by the store's seed. Parameters
//! are created in construction order, which makes initialization a pure
//! function of (seed, architecture).

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::fused::{channel_stats, Activation, ActivationOp, BatchNormOp, GroupNormOp};
use super::im2col::Conv2dOp;
use crate::error::{Error, Result};
use crate::seeds::rng_from_seed;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform with variance `1 / fan_in` scaled by `gain^2`.
    FanIn { gain: f64 },
    Normal { std: f64 },
    Const(f64),
}

struct Entry {
    var: Var,
    trainable: bool,
}

struct Inner {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

/// Named tensors owned by one model.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock().expect("param store poisoned");
        f.debug_struct("ParamStore")
            .field("entries", &inner.entries.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: BTreeMap::new(),
                rng: rng_from_seed(seed),
            })),
            device: Device::Cpu,
        }
    }

    pub fn root(&self) -> Builder {
        Builder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable variables, in name order.
    pub fn trainable(&self) -> Vec<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.var.clone())
            .collect()
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn trainable_under(&self, prefix: &str) -> Vec<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .entries
            .iter()
            .filter(|(k, e)| e.trainable && k.starts_with(prefix))
            .map(|(_, e)| e.var.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|v| v.elem_count()).sum()
    }

    /// Every tensor, trainable or not, keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_tensor().clone()))
            .collect()
    }

    /// Deep copy of all current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites values from `values`; every stored name must be present.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().expect("param store poisoned");
        for (k, e) in &inner.entries {
            let v = values
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {k}")))?;
            if v.dims() != e.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {k}: shape {:?} does not match {:?}",
                    v.dims(),
                    e.var.dims()
                )));
            }
            e.var.set(&v.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    fn get_or_create(&self, name: String, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if let Some(e) = inner.entries.get(&name) {
            if e.var.dims() != shape {
                return Err(Error::State(format!(
                    "parameter {name} requested with shape {shape:?}, exists as {:?}",
                    e.var.dims()
                )));
            }
            return Ok(e.var.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let data: Vec<f32> = match init {
            Init::FanIn { gain } => {
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| inner.rng.random_range(-bound..bound) as f32)
                    .collect()
            }
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut inner.rng);
                    (z * std) as f32
                })
                .collect(),
            Init::Const(c) => vec![c as f32; n],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        inner.entries.insert(name, Entry { var, trainable });
        Ok(t)
    }

    /// Sets a non-trainable buffer in place.
    pub fn set_buffer(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.inner.lock().expect("param store poisoned");
        let e = inner
            .entries
            .get(name)
            .ok_or_else(|| Error::State(format!("no buffer {name}")))?;
        e.var.set(value)?;
        Ok(())
    }
}

/// A prefix into a [`ParamStore`], in the style of candle's `VarBuilder`.
#[derive(Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
}

impl Builder {
    pub fn pp(&self, name: impl AsRef<str>) -> Builder {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_create(self.full(name), shape, init, true)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_create(self.full(name), shape, init, false)
    }

    pub fn buffer_name(&self, name: &str) -> String {
        self.full(name)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// 2-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(b: &Builder, c_in: usize, c_out: usize, kernel: usize, padding: usize, stride: usize) -> Result<Self> {
        Self::with_gain(b, c_in, c_out, kernel, padding, stride, 1.0)
    }

    pub fn with_gain(
        b: &Builder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[c_out, c_in, kernel, kernel], Init::FanIn { gain })?,
            bias: Some(b.get("bias", &[c_out], Init::Const(0.0))?),
            padding,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0).expect("4-d weight")
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let op = Conv2dOp {
            stride: self.stride,
            padding: self.padding,
        };
        let x = x.contiguous()?;
        match &self.bias {
            Some(b) => x.apply_op3(&self.weight.contiguous()?, &b.contiguous()?, op),
            None => x.apply_op2(&self.weight.contiguous()?, op),
        }
    }
}

/// Convolution through the im2col custom op (fast CPU backward).
pub fn conv2d_im2col(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dOp { stride, padding })
}

/// Nearest-neighbour 2x upsampling via broadcasting (gradients accumulate
/// over the four copies).
pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2x(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &Builder, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_gain(b, d_in, d_out, 1.0)
    }

    pub fn with_gain(b: &Builder, d_in: usize, d_out: usize, gain: f64) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[d_out, d_in], Init::FanIn { gain })?,
            bias: Some(b.get("bias", &[d_out], Init::Const(0.0))?),
        })
    }

    pub fn no_bias(b: &Builder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[d_out, d_in], Init::FanIn { gain: 1.0 })?,
            bias: None,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

/// Group normalization with learned affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(b: &Builder, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Input(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            weight: b.get("weight", &[channels], Init::Const(1.0))?,
            bias: b.get("bias", &[channels], Init::Const(0.0))?,
            groups,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.contiguous()?.apply_op3(
            &self.weight,
            &self.bias,
            GroupNormOp {
                groups: self.groups,
                eps: 1e-5,
            },
        )
    }
}

/// Batch normalization; batch statistics while training, running
/// statistics (momentum 0.1, unbiased variance) at inference.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mean_name: String,
    var_name: String,
    store: ParamStore,
}

impl BatchNorm {
    const EPS: f64 = 1e-5;
    const MOMENTUM: f64 = 0.1;

    pub fn new(b: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[channels], Init::Const(1.0))?,
            bias: b.get("bias", &[channels], Init::Const(0.0))?,
            running_mean: b.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: b.buffer("running_var", &[channels], Init::Const(1.0))?,
            mean_name: b.buffer_name("running_mean"),
            var_name: b.buffer_name("running_var"),
            store: b.store().clone(),
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        if train {
            let x = x.contiguous()?;
            let y = x.apply_op3(&self.weight, &self.bias, BatchNormOp { eps: Self::EPS })?;
            let values: Vec<f32> = x.detach().flatten_all()?.to_vec1()?;
            let (mean, var) = channel_stats(&values, x.dims());
            let n = (x.elem_count() / c) as f64;
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm: Vec<f32> = self.running_mean.to_vec1()?;
            let rv: Vec<f32> = self.running_var.to_vec1()?;
            let m = Self::MOMENTUM;
            let new_mean: Vec<f32> = rm.iter().zip(&mean).map(|(r, b)| ((1.0 - m) * *r as f64 + m * b) as f32).collect();
            let new_var: Vec<f32> = rv
                .iter()
                .zip(&var)
                .map(|(r, b)| ((1.0 - m) * *r as f64 + m * b * correction) as f32)
                .collect();
            let dev = x.device();
            self.store.set_buffer(&self.mean_name, &Tensor::from_vec(new_mean, c, dev)?)?;
            self.store.set_buffer(&self.var_name, &Tensor::from_vec(new_var, c, dev)?)?;
            Ok(y)
        } else {
            let scale = (&self.weight / (&self.running_var + Self::EPS)?.sqrt()?)?;
            let shift = (&self.bias - (&self.running_mean * &scale)?)?;
            let shape = (1, c, 1, 1);
            Ok(x.broadcast_mul(&scale.reshape(shape)?)?.broadcast_add(&shift.reshape(shape)?)?)
        }
    }
}

/// Lookup table of learned row vectors.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(b: &Builder, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.get("table", &[rows, dim], Init::Normal { std: 1.0 })?,
        })
    }

    pub fn rows(&self) -> usize {
        self.table.dim(0).expect("2-d table")
    }

    /// `ids` is a u32 vector; returns `(len, dim)`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.table.index_select(ids, 0)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(ActivationOp(Activation::LeakyRelu(slope as f32)))
}

pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(ActivationOp(Activation::Silu))
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

pub fn ids_tensor(ids: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, ids.len(), device)?)
}

/// Sanity check used by training loops: scalar loss value, or a
/// non-finite-loss error carrying the position.
pub fn finite_scalar(loss: &Tensor, stage: &str, epoch: usize, batch: usize) -> Result<f64> {
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            stage: stage.to_string(),
            epoch,
            batch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::D;

    #[test]
    fn initialization_is_seeded() {
        let make = |seed| {
            let s = ParamStore::new(seed);
            let l = Linear::new(&s.root().pp("l"), 4, 3).unwrap();
            l.weight.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(make(1), make(1));
        assert_ne!(make(1), make(2));
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let s = ParamStore::new(0);
        let l = Linear::new(&s.root().pp("l"), 2, 2).unwrap();
        let snap = s.snapshot().unwrap();
        let before = l.weight.to_vec2::<f32>().unwrap();
        for v in s.trainable() {
            v.set(&v.as_tensor().ones_like().unwrap()).unwrap();
        }
        assert_ne!(l.weight.to_vec2::<f32>().unwrap(), before);
        s.restore(&snap).unwrap();
        assert_eq!(l.weight.to_vec2::<f32>().unwrap(), before);
    }

    #[test]
    fn leaky_relu_matches_definition() {
        let x = Tensor::new(&[-2f32, -0.5, 0.0, 1.5], &Device::Cpu).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![-0.4, -0.1, 0.0, 1.5]);
    }

    #[test]
    fn group_norm_normalizes() {
        let s = ParamStore::new(0);
        let gn = GroupNorm::new(&s.root().pp("gn"), 2, 4).unwrap();
        let x = Tensor::arange(0f32, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 2, 4))
            .unwrap();
        let y = gn.forward(&x).unwrap();
        let g = y.reshape((2, 16)).unwrap();
        let means = g.mean(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(means.iter().all(|m| m.abs() < 1e-5));
    }

    #[test]
    fn im2col_conv_matches_native() {
        for (k, pad, stride, size) in [(3, 1, 1, 6), (3, 1, 2, 6), (3, 1, 2, 7), (1, 0, 1, 5), (4, 1, 2, 8), (3, 0, 1, 5)] {
            let s = ParamStore::new(k as u64 + stride as u64);
            let root = s.root();
            let x = root.get("x", &[2, 3, size, size], Init::Normal { std: 1.0 }).unwrap();
            let w = root.get("w", &[4, 3, k, k], Init::Normal { std: 1.0 }).unwrap();
            let a = conv2d_im2col(&x, &w, pad, stride).unwrap();
            let b = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            let diff = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff < 1e-4, "forward k{k} p{pad} s{stride}: {diff}");

            let probe = root.get("probe", a.dims(), Init::Normal { std: 1.0 }).unwrap();
            let ga = (a * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (b * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for t in [&x, &w] {
                let d = (ga.get(t).unwrap() - gb.get(t).unwrap())
                    .unwrap()
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f32>()
                    .unwrap();
                assert!(d < 1e-3, "grad k{k} p{pad} s{stride}: {d}");
            }
        }
    }

    #[test]
    fn upsample_gradient_accumulates() {
        let x = Var::new(&[[[[1f32, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap();
        let y = upsample2x(x.as_tensor()).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        assert_eq!(y.get(0).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap()[1], vec![1.0, 1.0, 2.0, 2.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(gx, vec![4.0; 4]);
        let p = avg_pool2x(&y).unwrap();
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn fused_group_norm_matches_composite() {
        let s = ParamStore::new(5);
        let root = s.root();
        let gn = GroupNorm::new(&root.pp("gn"), 2, 4).unwrap();
        for v in s.trainable() {
            let noise = Tensor::randn(0f32, 0.3, v.dims(), &Device::Cpu).unwrap();
            v.set(&(v.as_tensor() + noise).unwrap()).unwrap();
        }
        let x = root.get("x", &[3, 4, 3, 5], Init::Normal { std: 2.0 }).unwrap();
        let probe = root.get("p", &[3, 4, 3, 5], Init::Normal { std: 1.0 }).unwrap();
        let composite = |x: &Tensor| -> Tensor {
            let g = x.reshape((3, 2, 30)).unwrap();
            let mean = g.mean_keepdim(D::Minus1).unwrap();
            let c = g.broadcast_sub(&mean).unwrap();
            let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
            let n = c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
            n.reshape((3, 4, 3, 5))
                .unwrap()
                .broadcast_mul(&gn.weight.reshape((1, 4, 1, 1)).unwrap())
                .unwrap()
                .broadcast_add(&gn.bias.reshape((1, 4, 1, 1)).unwrap())
                .unwrap()
        };
        let a = gn.forward(&x).unwrap();
        let b = composite(&x);
        assert!(max_diff(&a, &b) < 1e-5);
        let ga = (a * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for t in [&x, &gn.weight, &gn.bias] {
            assert!(max_diff(ga.get(t).unwrap(), gb.get(t).unwrap()) < 1e-4);
        }
    }

    #[test]
    fn fused_batch_norm_matches_composite() {
        let s = ParamStore::new(7);
        let root = s.root();
        let bn = BatchNorm::new(&root.pp("bn"), 4).unwrap();
        for v in s.trainable() {
            let noise = Tensor::randn(0f32, 0.3, v.dims(), &Device::Cpu).unwrap();
            v.set(&(v.as_tensor() + noise).unwrap()).unwrap();
        }
        let x = root.get("x", &[3, 4, 3, 5], Init::Normal { std: 2.0 }).unwrap();
        let probe = root.get("p", &[3, 4, 3, 5], Init::Normal { std: 1.0 }).unwrap();
        let composite = |x: &Tensor| -> Tensor {
            let t = x.transpose(0, 1).unwrap().contiguous().unwrap().reshape((4, 45)).unwrap();
            let mean = t.mean_keepdim(D::Minus1).unwrap();
            let c = t.broadcast_sub(&mean).unwrap();
            let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
            let n = c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
            n.broadcast_mul(&bn.weight.reshape((4, 1)).unwrap())
                .unwrap()
                .broadcast_add(&bn.bias.reshape((4, 1)).unwrap())
                .unwrap()
                .reshape((4, 3, 3, 5))
                .unwrap()
                .transpose(0, 1)
                .unwrap()
        };
        let a = bn.forward_t(&x, true).unwrap();
        let b = composite(&x);
        assert!(max_diff(&a, &b) < 1e-5);
        let ga = (a * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for t in [&x, &bn.weight, &bn.bias] {
            assert!(max_diff(ga.get(t).unwrap(), gb.get(t).unwrap()) < 1e-4);
        }
        // one update from (0, 1) moves running stats a tenth of the way
        let flat: Vec<f32> = x.transpose(0, 1).unwrap().flatten_from(1).unwrap().to_vec2::<f32>().unwrap()[0].clone();
        let m0 = flat.iter().map(|&v| v as f64).sum::<f64>() / 45.0;
        let rm: Vec<f32> = s.tensors()["bn.running_mean"].to_vec1().unwrap();
        assert!((rm[0] as f64 - 0.1 * m0).abs() < 1e-5);
        // inference uses the running statistics
        let eval = bn.forward_t(&x, false).unwrap();
        assert!(max_diff(&eval, &composite(&x)) > 1e-2);
    }

    #[test]
    fn fused_activations_match_composite() {
        let s = ParamStore::new(6);
        let x = s.root().get("x", &[50], Init::Normal { std: 3.0 }).unwrap();
        let cases: [(Tensor, Tensor); 2] = [
            (silu(&x).unwrap(), x.silu().unwrap()),
            (
                leaky_relu(&x, 0.2).unwrap(),
                (x.relu().unwrap() + (x.minimum(0f64).unwrap() * 0.2).unwrap()).unwrap(),
            ),
        ];
        for (a, b) in cases {
            assert!(max_diff(&a, &b) < 1e-5);
            let ga = a.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gb = b.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-4);
        }
    }
}
