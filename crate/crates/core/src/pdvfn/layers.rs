//! Parameterised building blocks shared by both branches.
//!
//! Each block registers its parameters in a [`ParamStore`] at construction
//! and reads them back through a [`Session`] on every forward pass.
//! Weights are uniform in `±sqrt(1 / fan_in)`, biases start at zero.

use rand_chacha::ChaCha8Rng;
use weaksig_tensor::nn::{self, BatchNormOptions};
use weaksig_tensor::{ParamId, ParamStore, Session, Tensor};

use crate::error::{validation, Result};

/// Convolution weights: `[out, in, k]` or `[out, in, k, k]` plus bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new_1d(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.uniform(&format!("{name}.w"), &[c_out, c_in, k], c_in * k, rng),
            b: store.constant(&format!("{name}.b"), &[c_out], 0.0),
        }
    }

    pub fn new_2d(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.uniform(&format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k, rng),
            b: store.constant(&format!("{name}.b"), &[c_out], 0.0),
        }
    }

    /// Reverse (transposed) 2-D convolution, weights `[in, out, k, k]`.
    pub fn new_reverse(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.uniform(&format!("{name}.w"), &[c_in, c_out, k, k], c_in * k * k, rng),
            b: store.constant(&format!("{name}.b"), &[c_out], 0.0),
        }
    }

    /// Stride 1, padding `k / 2` (length-preserving for odd `k`).
    pub fn same_1d(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let k = s.var(self.w).shape()[2];
        Ok(x.conv1d(s.var(self.w), Some(s.var(self.b)), 1, k / 2)?)
    }

    /// Stride 1, padding `k / 2` (size-preserving for odd `k`).
    pub fn same_2d(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let k = s.var(self.w).shape()[2];
        Ok(x.conv2d(s.var(self.w), Some(s.var(self.b)), 1, k / 2)?)
    }

    pub fn reverse_2d(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        Ok(x.reverse_conv2d(s.var(self.w), Some(s.var(self.b)))?)
    }
}

/// Fully connected layer, `w` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.uniform(&format!("{name}.w"), &[d_in, d_out], d_in, rng),
            b: store.constant(&format!("{name}.b"), &[d_out], 0.0),
        }
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        Ok(nn::linear(x, s.var(self.w), Some(s.var(self.b)))?)
    }
}

/// Layer normalisation with an affine map of shape `shape`, broadcast over
/// the trailing axes of the input.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, shape: &[usize]) -> Self {
        Self {
            gamma: store.constant(&format!("{name}.gamma"), shape, 1.0),
            beta: store.constant(&format!("{name}.beta"), shape, 0.0),
        }
    }

    /// Normalises over `axes`.
    pub fn forward(&self, s: &Session, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        Ok(nn::layer_norm(x, axes, s.var(self.gamma), s.var(self.beta), NORM_EPS)?)
    }
}

/// Batch normalisation over `[n, c, ...]` with running statistics kept as
/// non-trainable buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0),
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0),
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0),
        }
    }

    /// Batch statistics in training sessions (queueing the running-stat
    /// update), running statistics otherwise.
    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let opts = BatchNormOptions { training: s.training(), ..Default::default() };
        let (y, stats) = nn::batch_norm(
            x,
            s.var(self.gamma),
            s.var(self.beta),
            s.var(self.running_mean).data(),
            s.var(self.running_var).data(),
            opts,
        )?;
        if let Some(stats) = stats {
            s.record_update(self.running_mean, stats.mean);
            s.record_update(self.running_var, stats.var);
        }
        Ok(y)
    }
}

/// Channel attention followed by spatial attention over `[n, c, l]` or
/// `[n, c, h, w]`.
///
/// Channel weights: `σ(MLP(avg_pool(x)) + MLP(max_pool(x)))` with a shared
/// two-layer MLP of width `c / reduction`. Spatial weights: `σ` of a
/// convolution over the stacked channel-mean and channel-max maps.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub mlp_in: Dense,
    pub mlp_out: Dense,
    pub spatial: Conv,
    pub spatial_rank: usize,
}

/// Attention weights produced by a [`Cbam`] pass.
#[derive(Clone, Debug)]
pub struct CbamWeights {
    /// `[n, c]`.
    pub channel: Tensor,
    /// `[n, 1, l]` or `[n, 1, h, w]`.
    pub spatial: Tensor,
}

impl Cbam {
    /// `spatial_rank` is 1 for sequences and 2 for images; `kernel` is the
    /// odd spatial-attention kernel size.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        kernel: usize,
        spatial_rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if reduction == 0 || reduction > channels {
            return Err(validation(format!("cbam reduction {reduction} must be in 1..={channels}")));
        }
        if kernel % 2 == 0 {
            return Err(validation(format!("cbam kernel {kernel} must be odd")));
        }
        let hidden = channels / reduction;
        let spatial = match spatial_rank {
            1 => Conv::new_1d(store, &format!("{name}.spatial"), 2, 1, kernel, rng),
            2 => Conv::new_2d(store, &format!("{name}.spatial"), 2, 1, kernel, rng),
            r => return Err(validation(format!("cbam spatial rank {r} not supported"))),
        };
        Ok(Self {
            mlp_in: Dense::new(store, &format!("{name}.mlp_in"), channels, hidden, rng),
            mlp_out: Dense::new(store, &format!("{name}.mlp_out"), hidden, channels, rng),
            spatial,
            spatial_rank,
        })
    }

    fn mlp(&self, s: &Session, v: &Tensor) -> Result<Tensor> {
        self.mlp_out.forward(s, &self.mlp_in.forward(s, v)?.relu())
    }

    pub fn forward_with_weights(&self, s: &Session, x: &Tensor) -> Result<(Tensor, CbamWeights)> {
        let shape = x.shape().to_vec();
        if shape.len() != 2 + self.spatial_rank {
            return Err(validation(format!("cbam expects rank {} input, got {shape:?}", 2 + self.spatial_rank)));
        }
        let (n, c) = (shape[0], shape[1]);
        let flat = x.reshape(&[n, c, shape[2..].iter().product()])?;
        let avg = flat.mean_axes(&[2], false)?;
        let max = flat.max_axis(2, false)?;
        let channel = self.mlp(s, &avg)?.add(&self.mlp(s, &max)?)?.sigmoid();
        let mut bshape = vec![n, c];
        bshape.extend(std::iter::repeat_n(1, self.spatial_rank));
        let x = x.mul(&channel.reshape(&bshape)?)?;

        let pooled = Tensor::concat(&[x.mean_axes(&[1], true)?, x.max_axis(1, true)?], 1)?;
        let logits = if self.spatial_rank == 1 { self.spatial.same_1d(s, &pooled)? } else { self.spatial.same_2d(s, &pooled)? };
        let spatial = logits.sigmoid();
        let y = x.mul(&spatial)?;
        Ok((y, CbamWeights { channel, spatial }))
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weights(s, x).map(|(y, _)| y)
    }
}
