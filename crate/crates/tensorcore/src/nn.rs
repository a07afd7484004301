//! Composite layers built from the primitive ops: dense layers,
//! normalisation, a bidirectional GRU stack and multi-head attention.
//!
//! Weights are passed in as tensors so the same functions serve model code
//! (weights bound from a [`ParamStore`](crate::ParamStore)) and tests.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// `x @ w + b` over the last axis. `w` is `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = if x.rank() == 1 {
        let n = x.shape()[0];
        let out = w.shape().get(1).copied().unwrap_or(0);
        x.reshape(&[1, n])?.matmul(w)?.reshape(&[out])?
    } else {
        x.matmul(w)?
    };
    match b {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// `(x - mean) / sqrt(var + eps)` with statistics over `axes` (population
/// variance).
pub fn normalize(x: &Tensor, axes: &[usize], eps: f64) -> Result<Tensor> {
    let mean = x.mean_axes(axes, true)?;
    let centered = x.sub(&mean)?;
    let var = centered.square().mean_axes(axes, true)?;
    centered.mul(&var.add_scalar(eps).powf(-0.5))
}

/// Layer normalisation over `axes` followed by a broadcast affine map.
pub fn layer_norm(x: &Tensor, axes: &[usize], gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    normalize(x, axes, eps)?.mul(gamma)?.add(beta)
}

/// Batch statistics produced by a training-mode [`batch_norm`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormOptions {
    pub training: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        Self { training: true, momentum: 0.1, eps: 1e-5 }
    }
}

/// Batch normalisation of `[n, c, ...]` with per-channel `gamma`/`beta`.
///
/// In training mode the batch statistics normalise the input and the
/// updated running statistics are returned (running variance uses the
/// unbiased estimate). In eval mode the running statistics are used and
/// the op is a fixed affine map.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    opts: BatchNormOptions,
) -> Result<(Tensor, Option<BatchStats>)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(shape_err("batch_norm", format!("need [n, c, ...], got {s:?}")));
    }
    let c = s[1];
    if gamma.numel() != c || beta.numel() != c || running_mean.len() != c || running_var.len() != c {
        return Err(shape_err("batch_norm", format!("parameters do not match {c} channels")));
    }
    let mut pshape = vec![1; s.len()];
    pshape[1] = c;
    let g = gamma.reshape(&pshape)?;
    let b = beta.reshape(&pshape)?;
    if opts.training {
        let axes: Vec<usize> = (0..s.len()).filter(|&d| d != 1).collect();
        let count: usize = axes.iter().map(|&d| s[d]).product();
        let mean = x.mean_axes(&axes, true)?;
        let centered = x.sub(&mean)?;
        let var = centered.square().mean_axes(&axes, true)?;
        let y = centered.mul(&var.add_scalar(opts.eps).powf(-0.5))?.mul(&g)?.add(&b)?;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let m = opts.momentum;
        let stats = BatchStats {
            mean: running_mean.iter().zip(mean.data()).map(|(r, v)| (1.0 - m) * r + m * v).collect(),
            var: running_var
                .iter()
                .zip(var.data())
                .map(|(r, v)| (1.0 - m) * r + m * v * unbias)
                .collect(),
        };
        Ok((y, Some(stats)))
    } else {
        let scale: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + opts.eps).sqrt()).collect();
        let shift: Vec<f64> = running_mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        let scale = Tensor::new(scale, &pshape)?;
        let shift = Tensor::new(shift, &pshape)?;
        let y = x.mul(&scale)?.add(&shift)?.mul(&g)?.add(&b)?;
        Ok((y, None))
    }
}

/// One GRU direction. Gate blocks are ordered reset, update, candidate:
///
/// ```text
/// r = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruWeights {
    /// `[input, 3 * hidden]`
    pub w_ih: Tensor,
    /// `[hidden, 3 * hidden]`
    pub w_hh: Tensor,
    /// `[3 * hidden]`
    pub b_ih: Tensor,
    /// `[3 * hidden]`
    pub b_hh: Tensor,
}

impl GruWeights {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct GruLayer {
    pub forward: GruWeights,
    pub backward: GruWeights,
}

/// Runs one direction over `[n, steps, features]` from a zero state.
/// Returns `[n, steps, hidden]` in the original step order.
pub fn gru_direction(x: &Tensor, w: &GruWeights, reverse: bool) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err("gru", format!("expected [n, steps, features], got {s:?}")));
    }
    let (n, steps) = (s[0], s[1]);
    let h = w.hidden();
    if h == 0 {
        return Err(invalid("gru", "hidden size must be positive"));
    }
    if w.w_ih.shape() != [s[2], 3 * h] || w.w_hh.shape() != [h, 3 * h] {
        return Err(shape_err(
            "gru",
            format!("w_ih {:?} / w_hh {:?} for input {s:?}", w.w_ih.shape(), w.w_hh.shape()),
        ));
    }
    // input contributions for every step in one product
    let xi = x.matmul(&w.w_ih)?.add(&w.b_ih)?;
    let mut state = Tensor::zeros(&[n, h]);
    let mut outputs: Vec<Tensor> = Vec::with_capacity(steps);
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let xt = xi.narrow(1, t, 1)?.reshape(&[n, 3 * h])?;
        let hh = state.matmul(&w.w_hh)?.add(&w.b_hh)?;
        let r = xt.narrow(1, 0, h)?.add(&hh.narrow(1, 0, h)?)?.sigmoid();
        let z = xt.narrow(1, h, h)?.add(&hh.narrow(1, h, h)?)?.sigmoid();
        let cand = xt.narrow(1, 2 * h, h)?.add(&r.mul(&hh.narrow(1, 2 * h, h)?)?)?.tanh();
        // (1 - z) n + z h = n + z (h - n)
        state = cand.add(&z.mul(&state.sub(&cand)?)?)?;
        outputs.push(state.reshape(&[n, 1, h])?);
    }
    if reverse {
        outputs.reverse();
    }
    Tensor::concat(&outputs, 1)
}

/// Stacked bidirectional GRU. Each layer concatenates its forward and
/// backward outputs (`[.., 2 * hidden]`) and feeds them to the next layer.
/// Accepts `[steps, features]` or `[n, steps, features]`.
pub fn gru_bidirectional(x: &Tensor, layers: &[GruLayer]) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(invalid("gru_bidirectional", "no layers"));
    }
    let unbatched = x.rank() == 2;
    let mut cur = if unbatched { x.reshape(&[1, x.shape()[0], x.shape()[1]])? } else { x.clone() };
    for layer in layers {
        let f = gru_direction(&cur, &layer.forward, false)?;
        let b = gru_direction(&cur, &layer.backward, true)?;
        cur = Tensor::concat(&[f, b], 2)?;
    }
    if unbatched {
        let s = cur.shape().to_vec();
        cur = cur.reshape(&s[1..])?;
    }
    Ok(cur)
}

/// Projections for [`multi_head_attention`]; every matrix is `[d, d]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Scaled dot-product self-attention with `heads` heads over
/// `[n, steps, d]` (or `[steps, d]`). Returns the output and the attention
/// weights `[n, heads, steps, steps]`, whose rows sum to one.
pub fn multi_head_attention(x: &Tensor, w: &AttentionWeights, heads: usize) -> Result<(Tensor, Tensor)> {
    let unbatched = x.rank() == 2;
    let x3 = if unbatched { x.reshape(&[1, x.shape()[0], x.shape()[1]])? } else { x.clone() };
    let s = x3.shape().to_vec();
    if s.len() != 3 {
        return Err(shape_err("multi_head_attention", format!("expected [n, steps, d], got {:?}", x.shape())));
    }
    let (n, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(invalid("multi_head_attention", format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let split = |y: Tensor| -> Result<Tensor> { y.reshape(&[n, t, heads, dh])?.permute(&[0, 2, 1, 3]) };
    let q = split(linear(&x3, &w.wq, Some(&w.bq))?)?;
    let k = split(linear(&x3, &w.wk, Some(&w.bk))?)?;
    let v = split(linear(&x3, &w.wv, Some(&w.bv))?)?;
    let scores = q.matmul(&k.transpose_last()?)?.mul_scalar(1.0 / (dh as f64).sqrt());
    let attn = scores.softmax()?;
    let ctx = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[n, t, d])?;
    let mut out = linear(&ctx, &w.wo, Some(&w.bo))?;
    if unbatched {
        out = out.reshape(&[t, d])?;
    }
    Ok((out, attn))
}
