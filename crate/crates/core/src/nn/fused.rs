//! Fused CPU kernels for group normalization and pointwise activations.
//! Candle composes these from many broadcast ops whose backward passes
//! dominate training time on CPU; here each is one loop with an analytic
//! first-order gradient.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Shape, Tensor};

fn f32_slice<'a>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = storage.as_slice::<f32>()?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("fused op needs contiguous input"),
    }
}

fn values(t: &Tensor) -> candle_core::Result<Vec<f32>> {
    t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()
}

pub(crate) struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
}

struct GroupStats {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl GroupNormOp {
    fn stats(&self, x: &[f32], batch: usize, group_len: usize) -> GroupStats {
        let n = batch * self.groups;
        let mut mean = Vec::with_capacity(n);
        let mut inv_std = Vec::with_capacity(n);
        for g in x.chunks(group_len) {
            let m = g.iter().map(|&v| v as f64).sum::<f64>() / group_len as f64;
            let var = g.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / group_len as f64;
            mean.push(m as f32);
            inv_std.push((1.0 / (var + self.eps).sqrt()) as f32);
        }
        GroupStats { mean, inv_std }
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        gs: &CpuStorage,
        gl: &Layout,
        bs: &CpuStorage,
        bl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = xl.dims();
        let (b, c) = (dims[0], dims[1]);
        let hw: usize = dims[2..].iter().product();
        let x = f32_slice(xs, xl)?;
        let gamma = f32_slice(gs, gl)?;
        let beta = f32_slice(bs, bl)?;
        let per_group = c / self.groups;
        let st = self.stats(x, b, per_group * hw);
        let mut out = vec![0f32; x.len()];
        for n in 0..b {
            for ch in 0..c {
                let gi = n * self.groups + ch / per_group;
                let (m, s) = (st.mean[gi], st.inv_std[gi]);
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = (x[i] - m) * s * gamma[ch] + beta[ch];
                }
            }
        }
        Ok((CpuStorage::F32(out), xl.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims();
        let (b, c) = (dims[0], dims[1]);
        let hw: usize = dims[2..].iter().product();
        let xv = values(x)?;
        let gv = values(gamma)?;
        let dy = values(grad)?;
        let per_group = c / self.groups;
        let glen = per_group * hw;
        let st = self.stats(&xv, b, glen);
        let mut dx = vec![0f32; xv.len()];
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        for n in 0..b {
            for g in 0..self.groups {
                let gi = n * self.groups + g;
                let (m, s) = (st.mean[gi], st.inv_std[gi]);
                // sums of dxhat and dxhat * xhat over the group
                let (mut sum_d, mut sum_dx) = (0f64, 0f64);
                for ch in g * per_group..(g + 1) * per_group {
                    let base = (n * c + ch) * hw;
                    for i in base..base + hw {
                        let xhat = (xv[i] - m) * s;
                        let d = dy[i] * gv[ch];
                        sum_d += d as f64;
                        sum_dx += (d * xhat) as f64;
                        dgamma[ch] += (dy[i] * xhat) as f64;
                        dbeta[ch] += dy[i] as f64;
                    }
                }
                let (md, mdx) = ((sum_d / glen as f64) as f32, (sum_dx / glen as f64) as f32);
                for ch in g * per_group..(g + 1) * per_group {
                    let base = (n * c + ch) * hw;
                    for i in base..base + hw {
                        let xhat = (xv[i] - m) * s;
                        dx[i] = s * (dy[i] * gv[ch] - md - xhat * mdx);
                    }
                }
            }
        }
        let dev = Device::Cpu;
        let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
        Ok((
            Some(Tensor::from_vec(dx, dims, &dev)?),
            Some(Tensor::from_vec(to32(dgamma), c, &dev)?),
            Some(Tensor::from_vec(to32(dbeta), c, &dev)?),
        ))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Activation {
    Silu,
    LeakyRelu(f32),
}

impl Activation {
    fn value(self, x: f32) -> f32 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
        }
    }

    fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }
}

pub(crate) struct ActivationOp(pub Activation);

impl CustomOp1 for ActivationOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Activation::Silu => "silu-fused",
            Activation::LeakyRelu(_) => "leaky-relu-fused",
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = f32_slice(s, l)?;
        let out = x.iter().map(|&v| self.0.value(v)).collect();
        Ok((CpuStorage::F32(out), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let xv = values(x)?;
        let dy = values(grad)?;
        let dx: Vec<f32> = xv.iter().zip(&dy).map(|(&v, &d)| d * self.0.derivative(v)).collect();
        Ok(Some(Tensor::from_vec(dx, x.dims(), &Device::Cpu)?))
    }
}

/// Training-mode batch normalization over `(batch, height, width)` per
/// channel, with biased batch variance.
pub(crate) struct BatchNormOp {
    pub eps: f64,
}

/// Per-channel batch mean and biased variance of a contiguous NCHW slice.
pub(crate) fn channel_stats(x: &[f32], dims: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (b, c) = (dims[0], dims[1]);
    let hw: usize = dims[2..].iter().product();
    let n = (b * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ch in 0..c {
        let mut s = 0f64;
        for i in 0..b {
            let base = (i * c + ch) * hw;
            s += x[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / n;
        let mut q = 0f64;
        for i in 0..b {
            let base = (i * c + ch) * hw;
            q += x[base..base + hw].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / n;
    }
    (mean, var)
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        gs: &CpuStorage,
        gl: &Layout,
        bs: &CpuStorage,
        bl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = xl.dims();
        let (b, c) = (dims[0], dims[1]);
        let hw: usize = dims[2..].iter().product();
        let x = f32_slice(xs, xl)?;
        let gamma = f32_slice(gs, gl)?;
        let beta = f32_slice(bs, bl)?;
        let (mean, var) = channel_stats(x, dims);
        let mut out = vec![0f32; x.len()];
        for ch in 0..c {
            let m = mean[ch] as f32;
            let s = (1.0 / (var[ch] + self.eps).sqrt()) as f32;
            for i in 0..b {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    out[j] = (x[j] - m) * s * gamma[ch] + beta[ch];
                }
            }
        }
        Ok((CpuStorage::F32(out), xl.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims();
        let (b, c) = (dims[0], dims[1]);
        let hw: usize = dims[2..].iter().product();
        let n = (b * hw) as f64;
        let xv = values(x)?;
        let gv = values(gamma)?;
        let dy = values(grad)?;
        let (mean, var) = channel_stats(&xv, dims);
        let mut dx = vec![0f32; xv.len()];
        let mut dgamma = vec![0f32; c];
        let mut dbeta = vec![0f32; c];
        for ch in 0..c {
            let m = mean[ch] as f32;
            let s = (1.0 / (var[ch] + self.eps).sqrt()) as f32;
            let (mut sum_dy, mut sum_dy_xhat) = (0f64, 0f64);
            for i in 0..b {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xhat = (xv[j] - m) * s;
                    sum_dy += dy[j] as f64;
                    sum_dy_xhat += (dy[j] * xhat) as f64;
                }
            }
            dgamma[ch] = sum_dy_xhat as f32;
            dbeta[ch] = sum_dy as f32;
            let (md, mdx) = ((sum_dy / n) as f32, (sum_dy_xhat / n) as f32);
            for i in 0..b {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xhat = (xv[j] - m) * s;
                    dx[j] = gv[ch] * s * (dy[j] - md - xhat * mdx);
                }
            }
        }
        let dev = Device::Cpu;
        Ok((
            Some(Tensor::from_vec(dx, dims, &dev)?),
            Some(Tensor::from_vec(dgamma, c, &dev)?),
            Some(Tensor::from_vec(dbeta, c, &dev)?),
        ))
    }
}
