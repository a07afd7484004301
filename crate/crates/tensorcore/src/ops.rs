//! Elementwise, reduction, shape and matrix operations.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{numel, Tensor};

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out` (right-aligned), zero on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|d| {
            if d < offset || shape[d - offset] == 1 {
                0
            } else {
                own[d - offset]
            }
        })
        .collect()
}

/// Visits every element of `out` in row-major order together with the
/// matching offsets into two strided operands.
pub(crate) fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    while flat < total {
        for j in 0..inner {
            f(flat + j, oa + j * ia, ob + j * ib);
        }
        flat += inner;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.data(), other.data());
        if self.shape() == other.shape() {
            let data: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_op(
                op,
                data,
                self.shape().to_vec(),
                vec![self.clone(), other.clone()],
                move |g, inputs, out, sink| {
                    let (a, b) = (inputs[0].data(), inputs[1].data());
                    sink.accumulate(0, |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * da(a[i], b[i], out[i]);
                        }
                    });
                    sink.accumulate(1, |gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * db(a[i], b[i], out[i]);
                        }
                    });
                },
            ));
        }
        let shape = broadcast_shapes(op, self.shape(), other.shape())?;
        let sa = aligned_strides(self.shape(), &shape);
        let sb = aligned_strides(other.shape(), &shape);
        let mut data = vec![0.0; numel(&shape)];
        for_each_pair(&shape, &sa, &sb, |o, i, j| data[o] = f(a[i], b[j]));
        let out_shape = shape.clone();
        Ok(Tensor::from_op(
            op,
            data,
            shape,
            vec![self.clone(), other.clone()],
            move |g, inputs, out, sink| {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                sink.accumulate(0, |ga| {
                    for_each_pair(&out_shape, &sa, &sb, |o, i, j| {
                        ga[i] += g[o] * da(a[i], b[j], out[o]);
                    });
                });
                sink.accumulate(1, |gb| {
                    for_each_pair(&out_shape, &sa, &sb, |o, i, j| {
                        gb[j] += g[o] * db(a[i], b[j], out[o]);
                    });
                });
            },
        ))
    }

    /// Broadcasting addition.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |x, y| x / y, |_, y, _| 1.0 / y, |x, y, _| -x / (y * y))
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            op,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, inputs, out, sink| {
                let x = inputs[0].data();
                sink.accumulate(0, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * df(x[i], out[i]);
                    }
                });
            },
        )
    }

    /// Elementwise map with a caller-supplied derivative `df(x, f(x))`.
    pub fn map(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        self.unary("map", f, df)
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary("powf", move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn relu(&self) -> Tensor {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        Tensor::from_op("sum", vec![total], vec![], vec![self.clone()], |g, _, _, sink| {
            sink.accumulate(0, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    fn reduced_shape(&self, op: &'static str, axes: &[usize]) -> Result<Vec<usize>> {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(invalid(op, format!("axis {a} out of range for {:?}", self.shape())));
            }
            shape[a] = 1;
        }
        Ok(shape)
    }

    fn squeeze_axes(shape: &[usize], axes: &[usize]) -> Vec<usize> {
        shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect()
    }

    /// Sum over `axes`. With `keepdim` the reduced axes stay as size 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let kept = self.reduced_shape("sum_axes", axes)?;
        let in_shape = self.shape().to_vec();
        let s_in = contiguous_strides(&in_shape);
        let s_red = aligned_strides(&kept, &in_shape);
        let x = self.data();
        let mut data = vec![0.0; numel(&kept)];
        for_each_pair(&in_shape, &s_in, &s_red, |_, i, o| data[o] += x[i]);
        let shape = if keepdim { kept } else { Self::squeeze_axes(&in_shape, axes) };
        Ok(Tensor::from_op("sum_axes", data, shape, vec![self.clone()], move |g, _, _, sink| {
            sink.accumulate(0, |gx| {
                for_each_pair(&in_shape, &s_in, &s_red, |_, i, o| gx[i] += g[o]);
            });
        }))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes, keepdim)?.mul_scalar(1.0 / count.max(1) as f64))
    }

    /// Maximum along one axis; gradient flows to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let kept = self.reduced_shape("max_axis", &[axis])?;
        let in_shape = self.shape().to_vec();
        let s_in = contiguous_strides(&in_shape);
        let s_red = aligned_strides(&kept, &in_shape);
        let x = self.data();
        let mut data = vec![f64::NEG_INFINITY; numel(&kept)];
        let mut arg = vec![0usize; numel(&kept)];
        for_each_pair(&in_shape, &s_in, &s_red, |_, i, o| {
            if x[i] > data[o] {
                data[o] = x[i];
                arg[o] = i;
            }
        });
        let shape = if keepdim { kept } else { Self::squeeze_axes(&in_shape, &[axis]) };
        Ok(Tensor::from_op("max_axis", data, shape, vec![self.clone()], move |g, _, _, sink| {
            sink.accumulate(0, |gx| {
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g[o];
                }
            });
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g, _, _, sink| {
                sink.accumulate(0, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            },
        ))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let s_in = contiguous_strides(self.shape());
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let s_gather: Vec<usize> = axes.iter().map(|&a| s_in[a]).collect();
        let s_out = contiguous_strides(&shape);
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for_each_pair(&shape, &s_out, &s_gather, |o, _, i| data[o] = x[i]);
        let out_shape = shape.clone();
        Ok(Tensor::from_op("permute", data, shape, vec![self.clone()], move |g, _, _, sink| {
            sink.accumulate(0, |gx| {
                for_each_pair(&out_shape, &s_out, &s_gather, |o, _, i| gx[i] += g[o]);
            });
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(invalid("transpose_last", "rank below 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape_in = self.shape().to_vec();
        if axis >= shape_in.len() || start + len > shape_in[axis] {
            return Err(invalid(
                "narrow",
                format!("{start}+{len} on axis {axis} of {shape_in:?}"),
            ));
        }
        let outer: usize = shape_in[..axis].iter().product();
        let inner: usize = shape_in[axis + 1..].iter().product();
        let full = shape_in[axis];
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = shape_in;
        shape[axis] = len;
        Ok(Tensor::from_op("narrow", data, shape, vec![self.clone()], move |g, _, _, sink| {
            sink.accumulate(0, |gx| {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    gx[base..base + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            });
        }))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(invalid("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", first.shape(), p.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op("concat", data, shape, parts.to_vec(), move |g, _, _, sink| {
            let mut offset = 0;
            for (k, &w) in widths.iter().enumerate() {
                sink.accumulate(k, |gx| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + w];
                        gx[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                });
                offset += w;
            }
        }))
    }

    /// Matrix product over the last two axes. `other` is either a plain
    /// matrix shared across the leading axes of `self`, or carries the same
    /// leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: need rank >= 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != k2 || !(batch_b.is_empty() || batch_b == batch_a) {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batches = numel(batch_a);
        let shared = batch_b.is_empty();
        let (a, b) = (self.data(), other.data());
        let mut data = vec![0.0; batches * m * n];
        for bt in 0..batches {
            let ao = &a[bt * m * k..(bt + 1) * m * k];
            let bo = if shared { b } else { &b[bt * k * n..(bt + 1) * k * n] };
            let co = &mut data[bt * m * n..(bt + 1) * m * n];
            for i in 0..m {
                let crow = &mut co[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ao[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bo[p * n..(p + 1) * n];
                    crow.iter_mut().zip(brow).for_each(|(c, &bv)| *c += av * bv);
                }
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        Ok(Tensor::from_op("matmul", data, shape, vec![self.clone(), other.clone()], move |g, inputs, _, sink| {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            sink.accumulate(0, |ga| {
                for bt in 0..batches {
                    let bo = if shared { b } else { &b[bt * k * n..(bt + 1) * k * n] };
                    for i in 0..m {
                        let grow = &g[bt * m * n + i * n..bt * m * n + (i + 1) * n];
                        for p in 0..k {
                            let brow = &bo[p * n..(p + 1) * n];
                            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            ga[bt * m * k + i * k + p] += s;
                        }
                    }
                }
            });
            sink.accumulate(1, |gb| {
                for bt in 0..batches {
                    let ao = &a[bt * m * k..(bt + 1) * m * k];
                    let go = if shared { 0 } else { bt * k * n };
                    for i in 0..m {
                        let grow = &g[bt * m * n + i * n..bt * m * n + (i + 1) * n];
                        for p in 0..k {
                            let av = ao[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[go + p * n..go + (p + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, &gv)| *d += av * gv);
                        }
                    }
                }
            });
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| invalid("softmax", "rank 0"))?;
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(Tensor::from_op("softmax", data, self.shape().to_vec(), vec![self.clone()], move |g, _, y, sink| {
            sink.accumulate(0, |gx| {
                for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        xr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| invalid("log_softmax", "rank 0"))?;
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(Tensor::from_op("log_softmax", data, self.shape().to_vec(), vec![self.clone()], move |g, _, y, sink| {
            sink.accumulate(0, |gx| {
                for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        xr[j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            });
        }))
    }

    /// Picks `x[i, index[i]]` from a `[n, classes]` tensor.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[0] != index.len() {
            return Err(shape_err("gather_rows", format!("{:?} with {} indices", self.shape(), index.len())));
        }
        let c = self.shape()[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(invalid("gather_rows", format!("index {bad} with {c} columns")));
        }
        let x = self.data();
        let data: Vec<f64> = index.iter().enumerate().map(|(r, &i)| x[r * c + i]).collect();
        let index = index.to_vec();
        Ok(Tensor::from_op("gather_rows", data, vec![index.len()], vec![self.clone()], move |g, _, _, sink| {
            sink.accumulate(0, |gx| {
                for (r, &i) in index.iter().enumerate() {
                    gx[r * c + i] += g[r];
                }
            });
        }))
    }
}
