//! Building blocks shared by the autoencoder and the denoiser.

use candle_core::{Module, Tensor};

use super::params::{silu, Builder, Conv2d, GroupNorm};
use crate::error::Result;

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

/// Pre-activation residual block, `x + conv(silu(gn(conv(silu(gn(x))))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(b: &Builder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&b.pp("norm1"), norm_groups(c_in), c_in)?,
            conv1: Conv2d::new(&b.pp("conv1"), c_in, c_out, 3, 1, 1)?,
            norm2: GroupNorm::new(&b.pp("norm2"), norm_groups(c_out), c_out)?,
            conv2: Conv2d::with_gain(&b.pp("conv2"), c_out, c_out, 3, 1, 1, 0.5)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&b.pp("skip"), c_in, c_out, 1, 0, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward_with(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        if let Some(bias) = bias {
            h = h.broadcast_add(bias)?;
        }
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let s = match &self.skip {
            Some(skip) => skip.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}
