//! Shared neural-network plumbing on top of candle: seeded parameters,
//! layers, optimizers, checkpoints, and minibatching.

pub mod blocks;
pub mod checkpoint;
mod fused;
mod im2col;
pub mod optim;
pub mod params;

use rand::seq::SliceRandom;
use rand::Rng;

pub use checkpoint::Checkpoint;
pub use optim::{adam, SgdMomentum};
pub use params::{avg_pool2x, conv2d_im2col, finite_scalar, ids_tensor, leaky_relu, sigmoid, silu, upsample2x, Builder, Conv2d, Embedding, BatchNorm, GroupNorm, Init, Linear, ParamStore};

/// Shuffled minibatches of `0..n`; the last batch may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// In-order minibatches of `0..n`.
pub fn ordered_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
