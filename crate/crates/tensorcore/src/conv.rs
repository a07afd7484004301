//! Convolutions, pooling and resampling over `[batch, channels, ...]` data.
//!
//! Every op also accepts the unbatched layout (`[channels, len]` or
//! `[channels, h, w]`) and then returns an unbatched result.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Output positions `t` in `0..out_len` for which `t * stride + k - pad`
/// lands inside `0..len`.
fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

fn out_len(op: &'static str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid(op, "stride must be positive"));
    }
    if k == 0 || k > len + 2 * pad {
        return Err(shape_err(op, format!("kernel {k} exceeds padded length {}", len + 2 * pad)));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

/// Splits `x` into `(batch, rest, batched)` where `rest` has `spatial + 1` dims.
fn batched(op: &'static str, x: &Tensor, spatial: usize) -> Result<(usize, Vec<usize>, bool)> {
    let s = x.shape();
    if s.len() == spatial + 1 {
        Ok((1, s.to_vec(), false))
    } else if s.len() == spatial + 2 {
        Ok((s[0], s[1..].to_vec(), true))
    } else {
        Err(shape_err(op, format!("expected rank {} or {}, got {:?}", spatial + 1, spatial + 2, s)))
    }
}

fn with_batch(n: usize, rest: Vec<usize>, batched: bool) -> Vec<usize> {
    if batched {
        let mut s = vec![n];
        s.extend(rest);
        s
    } else {
        rest
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != channels => {
            Err(shape_err(op, format!("bias of {} values for {channels} channels", b.numel())))
        }
        _ => Ok(()),
    }
}

impl Tensor {
    /// 1-D cross-correlation. `weight` is `[out_ch, in_ch, k]`, zero padding.
    pub fn conv1d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        const OP: &str = "conv1d";
        let (n, rest, is_batched) = batched(OP, self, 1)?;
        let (c, l) = (rest[0], rest[1]);
        let ws = weight.shape();
        if ws.len() != 3 || ws[1] != c {
            return Err(shape_err(OP, format!("weight {ws:?} for input channels {c}")));
        }
        let (o, k) = (ws[0], ws[2]);
        check_bias(OP, bias, o)?;
        let lo = out_len(OP, l, k, stride, pad)?;
        let (x, w) = (self.data(), weight.data());
        let mut data = vec![0.0; n * o * lo];
        for b in 0..n {
            for oc in 0..o {
                let out = &mut data[(b * o + oc) * lo..(b * o + oc + 1) * lo];
                if let Some(bias) = bias {
                    out.iter_mut().for_each(|v| *v = bias.data()[oc]);
                }
                for ic in 0..c {
                    let xin = &x[(b * c + ic) * l..(b * c + ic + 1) * l];
                    for kk in 0..k {
                        let wv = w[(oc * c + ic) * k + kk];
                        let (t0, t1) = valid_range(kk, stride, pad, l, lo);
                        for t in t0..t1 {
                            out[t] += wv * xin[t * stride + kk - pad];
                        }
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        let shape = with_batch(n, vec![o, lo], is_batched);
        Ok(Tensor::from_op(OP, data, shape, inputs, move |g, inputs, _, sink| {
            let (x, w) = (inputs[0].data(), inputs[1].data());
            sink.accumulate(0, |gx| {
                for b in 0..n {
                    for oc in 0..o {
                        let go = &g[(b * o + oc) * lo..(b * o + oc + 1) * lo];
                        for ic in 0..c {
                            let gxi = &mut gx[(b * c + ic) * l..(b * c + ic + 1) * l];
                            for kk in 0..k {
                                let wv = w[(oc * c + ic) * k + kk];
                                let (t0, t1) = valid_range(kk, stride, pad, l, lo);
                                for t in t0..t1 {
                                    gxi[t * stride + kk - pad] += wv * go[t];
                                }
                            }
                        }
                    }
                }
            });
            sink.accumulate(1, |gw| {
                for b in 0..n {
                    for oc in 0..o {
                        let go = &g[(b * o + oc) * lo..(b * o + oc + 1) * lo];
                        for ic in 0..c {
                            let xin = &x[(b * c + ic) * l..(b * c + ic + 1) * l];
                            for kk in 0..k {
                                let (t0, t1) = valid_range(kk, stride, pad, l, lo);
                                let s: f64 = (t0..t1).map(|t| go[t] * xin[t * stride + kk - pad]).sum();
                                gw[(oc * c + ic) * k + kk] += s;
                            }
                        }
                    }
                }
            });
            if inputs.len() > 2 {
                sink.accumulate(2, |gb| {
                    for b in 0..n {
                        for oc in 0..o {
                            gb[oc] += g[(b * o + oc) * lo..(b * o + oc + 1) * lo].iter().sum::<f64>();
                        }
                    }
                });
            }
        }))
    }

    /// 2-D cross-correlation. `weight` is `[out_ch, in_ch, kh, kw]`; the same
    /// stride and zero padding apply on both spatial axes.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        const OP: &str = "conv2d";
        let (n, rest, is_batched) = batched(OP, self, 2)?;
        let (c, h, wd) = (rest[0], rest[1], rest[2]);
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != c {
            return Err(shape_err(OP, format!("weight {ws:?} for input channels {c}")));
        }
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        check_bias(OP, bias, o)?;
        let ho = out_len(OP, h, kh, stride, pad)?;
        let wo = out_len(OP, wd, kw, stride, pad)?;
        let (x, w) = (self.data(), weight.data());
        let mut data = vec![0.0; n * o * ho * wo];
        for b in 0..n {
            for oc in 0..o {
                let out = &mut data[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
                if let Some(bias) = bias {
                    out.iter_mut().for_each(|v| *v = bias.data()[oc]);
                }
                for ic in 0..c {
                    let xin = &x[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                    for i in 0..kh {
                        let (y0, y1) = valid_range(i, stride, pad, h, ho);
                        for j in 0..kw {
                            let wv = w[((oc * c + ic) * kh + i) * kw + j];
                            let (x0, x1) = valid_range(j, stride, pad, wd, wo);
                            for y in y0..y1 {
                                let row = (y * stride + i - pad) * wd;
                                for xo in x0..x1 {
                                    out[y * wo + xo] += wv * xin[row + xo * stride + j - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        let shape = with_batch(n, vec![o, ho, wo], is_batched);
        Ok(Tensor::from_op(OP, data, shape, inputs, move |g, inputs, _, sink| {
            let (x, w) = (inputs[0].data(), inputs[1].data());
            sink.accumulate(0, |gx| {
                for b in 0..n {
                    for oc in 0..o {
                        let go = &g[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
                        for ic in 0..c {
                            let gxi = &mut gx[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                            for i in 0..kh {
                                let (y0, y1) = valid_range(i, stride, pad, h, ho);
                                for j in 0..kw {
                                    let wv = w[((oc * c + ic) * kh + i) * kw + j];
                                    let (x0, x1) = valid_range(j, stride, pad, wd, wo);
                                    for y in y0..y1 {
                                        let row = (y * stride + i - pad) * wd;
                                        for xo in x0..x1 {
                                            gxi[row + xo * stride + j - pad] += wv * go[y * wo + xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
            sink.accumulate(1, |gw| {
                for b in 0..n {
                    for oc in 0..o {
                        let go = &g[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
                        for ic in 0..c {
                            let xin = &x[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                            for i in 0..kh {
                                let (y0, y1) = valid_range(i, stride, pad, h, ho);
                                for j in 0..kw {
                                    let (x0, x1) = valid_range(j, stride, pad, wd, wo);
                                    let mut s = 0.0;
                                    for y in y0..y1 {
                                        let row = (y * stride + i - pad) * wd;
                                        for xo in x0..x1 {
                                            s += go[y * wo + xo] * xin[row + xo * stride + j - pad];
                                        }
                                    }
                                    gw[((oc * c + ic) * kh + i) * kw + j] += s;
                                }
                            }
                        }
                    }
                }
            });
            if inputs.len() > 2 {
                sink.accumulate(2, |gb| {
                    for b in 0..n {
                        for oc in 0..o {
                            gb[oc] += g[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo].iter().sum::<f64>();
                        }
                    }
                });
            }
        }))
    }

    /// Size-preserving transposed correlation at stride 1 (the "reverse"
    /// convolution). `weight` is `[in_ch, out_ch, k, k]` with odd `k`; each
    /// input pixel scatters its kernel footprint onto the output, which is
    /// the same as correlating with the spatially flipped kernel.
    pub fn reverse_conv2d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        const OP: &str = "reverse_conv2d";
        let (n, rest, is_batched) = batched(OP, self, 2)?;
        let (c, h, wd) = (rest[0], rest[1], rest[2]);
        let ws = weight.shape();
        if ws.len() != 4 || ws[0] != c || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape_err(OP, format!("weight {ws:?} for input channels {c} (need odd square kernel)")));
        }
        let (o, k) = (ws[1], ws[2]);
        let pad = (k - 1) / 2;
        check_bias(OP, bias, o)?;
        let (x, w) = (self.data(), weight.data());
        let plane = h * wd;
        let mut data = vec![0.0; n * o * plane];
        for b in 0..n {
            if let Some(bias) = bias {
                for oc in 0..o {
                    data[(b * o + oc) * plane..(b * o + oc + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v = bias.data()[oc]);
                }
            }
            for ic in 0..c {
                let xin = &x[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                for oc in 0..o {
                    let out = &mut data[(b * o + oc) * plane..(b * o + oc + 1) * plane];
                    for i in 0..k {
                        // output row y = input row + i - pad
                        let (y0, y1) = valid_range(k - 1 - i, 1, pad, h, h);
                        for j in 0..k {
                            let wv = w[((ic * o + oc) * k + i) * k + j];
                            let (x0, x1) = valid_range(k - 1 - j, 1, pad, wd, wd);
                            for y in y0..y1 {
                                let yi = y + pad - i;
                                for xo in x0..x1 {
                                    out[y * wd + xo] += wv * xin[yi * wd + xo + pad - j];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        let shape = with_batch(n, vec![o, h, wd], is_batched);
        Ok(Tensor::from_op(OP, data, shape, inputs, move |g, inputs, _, sink| {
            let (x, w) = (inputs[0].data(), inputs[1].data());
            sink.accumulate(0, |gx| {
                for b in 0..n {
                    for ic in 0..c {
                        let gxi = &mut gx[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                        for oc in 0..o {
                            let go = &g[(b * o + oc) * plane..(b * o + oc + 1) * plane];
                            for i in 0..k {
                                let (y0, y1) = valid_range(k - 1 - i, 1, pad, h, h);
                                for j in 0..k {
                                    let wv = w[((ic * o + oc) * k + i) * k + j];
                                    let (x0, x1) = valid_range(k - 1 - j, 1, pad, wd, wd);
                                    for y in y0..y1 {
                                        let yi = y + pad - i;
                                        for xo in x0..x1 {
                                            gxi[yi * wd + xo + pad - j] += wv * go[y * wd + xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
            sink.accumulate(1, |gw| {
                for b in 0..n {
                    for ic in 0..c {
                        let xin = &x[(b * c + ic) * plane..(b * c + ic + 1) * plane];
                        for oc in 0..o {
                            let go = &g[(b * o + oc) * plane..(b * o + oc + 1) * plane];
                            for i in 0..k {
                                let (y0, y1) = valid_range(k - 1 - i, 1, pad, h, h);
                                for j in 0..k {
                                    let (x0, x1) = valid_range(k - 1 - j, 1, pad, wd, wd);
                                    let mut s = 0.0;
                                    for y in y0..y1 {
                                        let yi = y + pad - i;
                                        for xo in x0..x1 {
                                            s += go[y * wd + xo] * xin[yi * wd + xo + pad - j];
                                        }
                                    }
                                    gw[((ic * o + oc) * k + i) * k + j] += s;
                                }
                            }
                        }
                    }
                }
            });
            if inputs.len() > 2 {
                sink.accumulate(2, |gb| {
                    for b in 0..n {
                        for oc in 0..o {
                            gb[oc] += g[(b * o + oc) * plane..(b * o + oc + 1) * plane].iter().sum::<f64>();
                        }
                    }
                });
            }
        }))
    }

    /// Pools `[n, c, h, w]` (or `[c, h, w]`) over explicit row/column windows.
    fn window_pool2d(
        &self,
        op: &'static str,
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
        max: bool,
    ) -> Result<Tensor> {
        let (n, rest, is_batched) = batched(op, self, 2)?;
        let (c, h, w) = (rest[0], rest[1], rest[2]);
        let (ho, wo) = (rows.len(), cols.len());
        let x = self.data();
        let planes = n * c;
        let mut data = vec![0.0; planes * ho * wo];
        let mut arg = if max { vec![0usize; planes * ho * wo] } else { Vec::new() };
        for p in 0..planes {
            let xin = &x[p * h * w..(p + 1) * h * w];
            for (oy, &(r0, r1)) in rows.iter().enumerate() {
                for (ox, &(c0, c1)) in cols.iter().enumerate() {
                    let o = (p * ho + oy) * wo + ox;
                    if max {
                        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                        for y in r0..r1 {
                            for xx in c0..c1 {
                                if xin[y * w + xx] > best {
                                    best = xin[y * w + xx];
                                    at = p * h * w + y * w + xx;
                                }
                            }
                        }
                        data[o] = best;
                        arg[o] = at;
                    } else {
                        let mut s = 0.0;
                        for y in r0..r1 {
                            s += xin[y * w + c0..y * w + c1].iter().sum::<f64>();
                        }
                        data[o] = s / ((r1 - r0) * (c1 - c0)) as f64;
                    }
                }
            }
        }
        let shape = with_batch(n, vec![c, ho, wo], is_batched);
        Ok(Tensor::from_op(op, data, shape, vec![self.clone()], move |g, _, _, sink| {
            sink.accumulate(0, |gx| {
                if max {
                    for (o, &i) in arg.iter().enumerate() {
                        gx[i] += g[o];
                    }
                    return;
                }
                for p in 0..planes {
                    for (oy, &(r0, r1)) in rows.iter().enumerate() {
                        for (ox, &(c0, c1)) in cols.iter().enumerate() {
                            let share = g[(p * ho + oy) * wo + ox] / ((r1 - r0) * (c1 - c0)) as f64;
                            for y in r0..r1 {
                                for xx in c0..c1 {
                                    gx[p * h * w + y * w + xx] += share;
                                }
                            }
                        }
                    }
                }
            });
        }))
    }

    fn spatial_hw(&self, op: &'static str) -> Result<(usize, usize)> {
        let (_, rest, _) = batched(op, self, 2)?;
        Ok((rest[1], rest[2]))
    }

    pub fn max_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let (h, w) = self.spatial_hw("max_pool2d")?;
        let rows = strided_windows("max_pool2d", h, kernel, stride)?;
        let cols = strided_windows("max_pool2d", w, kernel, stride)?;
        self.window_pool2d("max_pool2d", rows, cols, true)
    }

    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let (h, w) = self.spatial_hw("avg_pool2d")?;
        let rows = strided_windows("avg_pool2d", h, kernel, stride)?;
        let cols = strided_windows("avg_pool2d", w, kernel, stride)?;
        self.window_pool2d("avg_pool2d", rows, cols, false)
    }

    /// Average pooling onto an exact `(out_h, out_w)` grid; bin `i` spans
    /// `floor(i*L/out) .. ceil((i+1)*L/out)`.
    pub fn adaptive_avg_pool2d(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (h, w) = self.spatial_hw("adaptive_avg_pool2d")?;
        let rows = adaptive_windows("adaptive_avg_pool2d", h, out_h)?;
        let cols = adaptive_windows("adaptive_avg_pool2d", w, out_w)?;
        self.window_pool2d("adaptive_avg_pool2d", rows, cols, false)
    }

    fn as_2d_rows(&self, op: &'static str) -> Result<(Tensor, usize, usize, bool)> {
        let (n, rest, is_batched) = batched(op, self, 1)?;
        Ok((self.reshape(&[n, rest[0], 1, rest[1]])?, n, rest[0], is_batched))
    }

    fn from_2d_rows(t: Tensor, n: usize, c: usize, is_batched: bool) -> Result<Tensor> {
        let l = t.shape()[3];
        t.reshape(&with_batch(n, vec![c, l], is_batched))
    }

    pub fn max_pool1d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let (x, n, c, b) = self.as_2d_rows("max_pool1d")?;
        let cols = strided_windows("max_pool1d", x.shape()[3], kernel, stride)?;
        Self::from_2d_rows(x.window_pool2d("max_pool1d", vec![(0, 1)], cols, true)?, n, c, b)
    }

    pub fn avg_pool1d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let (x, n, c, b) = self.as_2d_rows("avg_pool1d")?;
        let cols = strided_windows("avg_pool1d", x.shape()[3], kernel, stride)?;
        Self::from_2d_rows(x.window_pool2d("avg_pool1d", vec![(0, 1)], cols, false)?, n, c, b)
    }

    pub fn adaptive_avg_pool1d(&self, out_len: usize) -> Result<Tensor> {
        let (x, n, c, b) = self.as_2d_rows("adaptive_avg_pool1d")?;
        let cols = adaptive_windows("adaptive_avg_pool1d", x.shape()[3], out_len)?;
        Self::from_2d_rows(x.window_pool2d("adaptive_avg_pool1d", vec![(0, 1)], cols, false)?, n, c, b)
    }

    /// Nearest-neighbour upsampling of both spatial axes by `factor`.
    pub fn upsample_nearest2d(&self, factor: usize) -> Result<Tensor> {
        const OP: &str = "upsample_nearest2d";
        if factor == 0 {
            return Err(invalid(OP, "factor must be positive"));
        }
        let (n, rest, is_batched) = batched(OP, self, 2)?;
        let (c, h, w) = (rest[0], rest[1], rest[2]);
        let (ho, wo) = (h * factor, w * factor);
        let planes = n * c;
        let x = self.data();
        let mut data = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    data[(p * ho + y) * wo + xx] = x[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let shape = with_batch(n, vec![c, ho, wo], is_batched);
        Ok(Tensor::from_op(OP, data, shape, vec![self.clone()], move |g, _, _, sink| {
            sink.accumulate(0, |gx| {
                for p in 0..planes {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[(p * h + y / factor) * w + xx / factor] += g[(p * ho + y) * wo + xx];
                        }
                    }
                }
            });
        }))
    }
}

fn strided_windows(op: &'static str, len: usize, kernel: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let count = out_len(op, len, kernel, stride, 0)?;
    Ok((0..count).map(|i| (i * stride, i * stride + kernel)).collect())
}

fn adaptive_windows(op: &'static str, len: usize, out: usize) -> Result<Vec<(usize, usize)>> {
    if out == 0 || out > len {
        return Err(shape_err(op, format!("target {out} for input length {len}")));
    }
    Ok((0..out).map(|i| (i * len / out, ((i + 1) * len).div_ceil(out))).collect())
}
