//! Spatial operations on `(batch, height, width, channels)` tensors.

use super::ops::{matmul, tensor};
use super::{Real, Tape, Tensor, Var};
use crate::error::{ensure, Result};

/// Padding convention for the convolutions in this crate. Only "same"
/// (zero padding, stride 1, output spatial dims equal input) is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    #[default]
    Same,
}

fn im2col<T: Real>(x: &[T], dims: (usize, usize, usize, usize), kh: usize, kw: usize) -> Vec<T> {
    let (b, h, w, c) = dims;
    let (ph, pw) = (kh / 2, kw / 2);
    let k = kh * kw * c;
    let mut cols = vec![T::zero(); b * h * w * k];
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..w {
                let row = ((bi * h + oh) * w + ow) * k;
                for i in 0..kh {
                    let ih = oh + i;
                    if ih < ph || ih - ph >= h {
                        continue;
                    }
                    let ih = ih - ph;
                    for j in 0..kw {
                        let iw = ow + j;
                        if iw < pw || iw - pw >= w {
                            continue;
                        }
                        let iw = iw - pw;
                        let src = ((bi * h + ih) * w + iw) * c;
                        let dst = row + (i * kw + j) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], dims: (usize, usize, usize, usize), kh: usize, kw: usize) -> Vec<T> {
    let (b, h, w, c) = dims;
    let (ph, pw) = (kh / 2, kw / 2);
    let k = kh * kw * c;
    let mut x = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..w {
                let row = ((bi * h + oh) * w + ow) * k;
                for i in 0..kh {
                    let ih = oh + i;
                    if ih < ph || ih - ph >= h {
                        continue;
                    }
                    let ih = ih - ph;
                    for j in 0..kw {
                        let iw = ow + j;
                        if iw < pw || iw - pw >= w {
                            continue;
                        }
                        let iw = iw - pw;
                        let dst = ((bi * h + ih) * w + iw) * c;
                        let src = row + (i * kw + j) * c;
                        for (d, &s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn check_conv(x: &Tensor<impl Real>, kernel: &Tensor<impl Real>) -> Result<(usize, usize, usize, usize)> {
    let (_, _, _, c) = x.dims4()?;
    ensure!(
        kernel.rank() == 4,
        "conv kernel must be (kh, kw, c_in, c_out), got {:?}",
        kernel.shape()
    );
    let s = kernel.shape();
    ensure!(
        s[0] % 2 == 1 && s[1] % 2 == 1,
        "same padding needs odd kernel sizes, got {:?}",
        s
    );
    ensure!(
        s[2] == c,
        "kernel expects {} input channels, input has {}",
        s[2],
        c
    );
    Ok((s[0], s[1], s[2], s[3]))
}

/// Full 2-D convolution, stride 1, "same" zero padding.
/// Kernel layout is `(kh, kw, c_in, c_out)`.
pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (kh, kw, ci, co) = check_conv(x, kernel)?;
    let (b, h, w, _) = x.dims4()?;
    let rows = b * h * w;
    let k = kh * kw * ci;
    let mut out = vec![T::zero(); rows * co];
    if kh == 1 && kw == 1 {
        T::gemm(rows, k, co, x.data(), false, kernel.data(), false, &mut out, false);
    } else {
        let cols = im2col(x.data(), (b, h, w, ci), kh, kw);
        T::gemm(rows, k, co, &cols, false, kernel.data(), false, &mut out, false);
    }
    Tensor::new(&[b, h, w, co], out)
}

/// Depthwise convolution, stride 1, "same" zero padding.
/// Kernel layout is `(kh, kw, channels)`: one filter per input channel.
pub fn depthwise_conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4()?;
    ensure!(
        kernel.rank() == 3 && kernel.shape()[2] == c,
        "depthwise kernel must be (kh, kw, {}), got {:?}",
        c,
        kernel.shape()
    );
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    ensure!(kh % 2 == 1 && kw % 2 == 1, "same padding needs odd kernel sizes");
    let (ph, pw) = (kh / 2, kw / 2);
    let (xs, ks) = (x.data(), kernel.data());
    let mut out = vec![T::zero(); xs.len()];
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..w {
                let o = ((bi * h + oh) * w + ow) * c;
                for i in 0..kh {
                    let Some(ih) = (oh + i).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for j in 0..kw {
                        let Some(iw) = (ow + j).checked_sub(pw).filter(|&v| v < w) else {
                            continue;
                        };
                        let xo = ((bi * h + ih) * w + iw) * c;
                        let ko = (i * kw + j) * c;
                        for ch in 0..c {
                            out[o + ch] += xs[xo + ch] * ks[ko + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (b, h, w, c) = x.dims4().unwrap();
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (ph, pw) = (kh / 2, kw / 2);
    let (xs, ks, gs) = (x.data(), kernel.data(), g.data());
    let mut dx = vec![T::zero(); if need[0] { xs.len() } else { 0 }];
    let mut dk = vec![T::zero(); if need[1] { ks.len() } else { 0 }];
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..w {
                let o = ((bi * h + oh) * w + ow) * c;
                for i in 0..kh {
                    let Some(ih) = (oh + i).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for j in 0..kw {
                        let Some(iw) = (ow + j).checked_sub(pw).filter(|&v| v < w) else {
                            continue;
                        };
                        let xo = ((bi * h + ih) * w + iw) * c;
                        let ko = (i * kw + j) * c;
                        if need[0] {
                            for ch in 0..c {
                                dx[xo + ch] += gs[o + ch] * ks[ko + ch];
                            }
                        }
                        if need[1] {
                            for ch in 0..c {
                                dk[ko + ch] += gs[o + ch] * xs[xo + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need[0].then(|| tensor(x.shape(), dx)),
        need[1].then(|| tensor(kernel.shape(), dk)),
    )
}

/// Depthwise-separable convolution: depthwise `(k, k, c_in)` followed by a
/// pointwise `(1, 1, c_in, c_out)` convolution.
pub fn sepconv2d<T: Real>(
    x: &Tensor<T>,
    depthwise_kernel: &Tensor<T>,
    pointwise_kernel: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let Padding::Same = padding;
    ensure!(
        pointwise_kernel.rank() == 4 && pointwise_kernel.shape()[..2] == [1, 1],
        "pointwise kernel must be (1, 1, c_in, c_out), got {:?}",
        pointwise_kernel.shape()
    );
    let mid = depthwise_conv2d(x, depthwise_kernel)?;
    conv2d(&mid, pointwise_kernel)
}

/// Max pooling with `-inf` padding; output side is `(n + 2·pad − k)/stride + 1`.
pub fn max_pool2d<T: Real>(x: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    Ok(max_pool_indexed(x, kernel, stride, pad)?.0)
}

fn max_pool_indexed<T: Real>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, h, w, c) = x.dims4()?;
    ensure!(kernel >= 1 && stride >= 1, "pool kernel and stride must be >= 1");
    ensure!(
        h + 2 * pad >= kernel && w + 2 * pad >= kernel,
        "pool kernel {} larger than padded input {}x{}",
        kernel,
        h,
        w
    );
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let xs = x.data();
    let mut out = vec![T::zero(); b * oh * ow * c];
    let mut arg = vec![0usize; out.len()];
    for bi in 0..b {
        for y in 0..oh {
            for xw in 0..ow {
                let o = ((bi * oh + y) * ow + xw) * c;
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for i in 0..kernel {
                        let Some(ih) = (y * stride + i).checked_sub(pad).filter(|&v| v < h) else {
                            continue;
                        };
                        for j in 0..kernel {
                            let Some(iw) = (xw * stride + j).checked_sub(pad).filter(|&v| v < w) else {
                                continue;
                            };
                            let idx = ((bi * h + ih) * w + iw) * c + ch;
                            if best_idx == usize::MAX || xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o + ch] = best;
                    arg[o + ch] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::new(&[b, oh, ow, c], out)?, arg))
}

struct AxisWeights {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

/// Half-pixel sample positions, clamped to the valid range at the borders.
fn axis_weights(input: usize, output: usize) -> AxisWeights {
    let scale = input as f64 / output as f64;
    let mut wts = AxisWeights {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        wts.lo.push(lo);
        wts.hi.push(hi);
        wts.frac.push(src - lo as f64);
    }
    wts
}

/// Bilinear resize with half-pixel centers (`align_corners = false`) and
/// edge clamping. Every output is a convex combination of inputs.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4()?;
    ensure!(h >= 1 && w >= 1 && out_h >= 1 && out_w >= 1, "resize needs non-empty sizes");
    let (ay, ax) = (axis_weights(h, out_h), axis_weights(w, out_w));
    let xs = x.data();
    let mut out = vec![T::zero(); b * out_h * out_w * c];
    for bi in 0..b {
        for oy in 0..out_h {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], T::of(ay.frac[oy]));
            for ox in 0..out_w {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], T::of(ax.frac[ox]));
                let o = ((bi * out_h + oy) * out_w + ox) * c;
                let corners = [
                    (y0, x0, (T::one() - fy) * (T::one() - fx)),
                    (y0, x1, (T::one() - fy) * fx),
                    (y1, x0, fy * (T::one() - fx)),
                    (y1, x1, fy * fx),
                ];
                for (yy, xx, wt) in corners {
                    let src = ((bi * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        out[o + ch] += wt * xs[src + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[b, out_h, out_w, c], out)
}

fn resize_bilinear_backward<T: Real>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (out_h, out_w) = (g.shape()[1], g.shape()[2]);
    let (ay, ax) = (axis_weights(h, out_h), axis_weights(w, out_w));
    let gs = g.data();
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..out_h {
            let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], T::of(ay.frac[oy]));
            for ox in 0..out_w {
                let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], T::of(ax.frac[ox]));
                let o = ((bi * out_h + oy) * out_w + ox) * c;
                let corners = [
                    (y0, x0, (T::one() - fy) * (T::one() - fx)),
                    (y0, x1, (T::one() - fy) * fx),
                    (y1, x0, fy * (T::one() - fx)),
                    (y1, x1, fy * fx),
                ];
                for (yy, xx, wt) in corners {
                    let dst = ((bi * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        dx[dst + ch] += wt * gs[o + ch];
                    }
                }
            }
        }
    }
    tensor(in_shape, dx)
}

/// Doubles height and width by bilinear interpolation.
pub fn upsample_bilinear_x2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w, _) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

fn channel_stats<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let c = x.last_dim();
    let n = T::of((x.len() / c) as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// Per-channel mean and biased variance over all leading axes.
pub fn batch_statistics<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let c = x.last_dim();
    let (m, v) = channel_stats(x);
    (tensor(&[c], m), tensor(&[c], v))
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (kh, kw, ci, co) = check_conv(&xv, &kv)?;
        let (b, h, w, _) = xv.dims4()?;
        let rows = b * h * w;
        let k = kh * kw * ci;
        let pointwise = kh == 1 && kw == 1;
        let cols = if pointwise {
            xv.reshape(&[rows, k])?
        } else {
            Tensor::new(&[rows, k], im2col(xv.data(), (b, h, w, ci), kh, kw))?
        };
        let kmat = kv.reshape(&[k, co])?;
        let out = matmul(&cols, &kmat, false, false)?.reshape(&[b, h, w, co])?;
        let (x_shape, k_shape) = (xv.shape().to_vec(), kv.shape().to_vec());
        Ok(self.custom(out, &[x, kernel], move |g, need| {
            let g2 = g.reshape(&[rows, co]).unwrap();
            let dx = need[0].then(|| {
                let dcols = matmul(&g2, &kmat, false, true).unwrap();
                if pointwise {
                    dcols.reshape(&x_shape).unwrap()
                } else {
                    tensor(&x_shape, col2im(dcols.data(), (b, h, w, ci), kh, kw))
                }
            });
            let dk = need[1].then(|| matmul(&cols, &g2, true, false).unwrap().reshape(&k_shape).unwrap());
            vec![dx, dk]
        }))
    }

    pub fn depthwise_conv2d(&self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let out = depthwise_conv2d(&xv, &kv)?;
        Ok(self.custom(out, &[x, kernel], move |g, need| {
            let (dx, dk) = depthwise_backward(&xv, &kv, g, need);
            vec![dx, dk]
        }))
    }

    pub fn sepconv2d(&self, x: Var, depthwise_kernel: Var, pointwise_kernel: Var) -> Result<Var> {
        let pk = self.shape(pointwise_kernel);
        ensure!(
            pk.len() == 4 && pk[..2] == [1, 1],
            "pointwise kernel must be (1, 1, c_in, c_out), got {:?}",
            pk
        );
        let mid = self.depthwise_conv2d(x, depthwise_kernel)?;
        self.conv2d(mid, pointwise_kernel)
    }

    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let (out, arg) = max_pool_indexed(&xv, kernel, stride, pad)?;
        let x_shape = xv.shape().to_vec();
        Ok(self.custom(out, &[x], move |g, _| {
            let mut dx = vec![T::zero(); x_shape.iter().product()];
            for (&i, &gv) in arg.iter().zip(g.data()) {
                dx[i] += gv;
            }
            vec![Some(tensor(&x_shape, dx))]
        }))
    }

    pub fn resize_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = resize_bilinear(&xv, out_h, out_w)?;
        let x_shape = xv.shape().to_vec();
        Ok(self.custom(out, &[x], move |g, _| {
            vec![Some(resize_bilinear_backward(g, &x_shape))]
        }))
    }

    pub fn upsample_bilinear_x2(&self, x: Var) -> Result<Var> {
        let (_, h, w, _) = self.value(x).dims4()?;
        self.resize_bilinear(x, 2 * h, 2 * w)
    }

    /// Batch normalization with fixed (running) statistics:
    /// `γ·(x − μ)/√(σ² + ε) + β`.
    pub fn batch_norm_fixed(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.last_dim();
        ensure!(
            gv.len() == c && bv.len() == c && mean.len() == c && var.len() == c,
            "batch norm parameters must have {} channels",
            c
        );
        let inv: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mu = mean.to_vec();
        let mut out = xv.to_vec();
        for row in out.chunks_mut(c) {
            for ch in 0..c {
                row[ch] = (row[ch] - mu[ch]) * inv[ch] * gv.data()[ch] + bv.data()[ch];
            }
        }
        Ok(self.custom(tensor(xv.shape(), out), &[x, gamma, beta], move |g, need| {
            let mut dx = vec![T::zero(); if need[0] { xv.len() } else { 0 }];
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (r, (grow, xrow)) in g.data().chunks(c).zip(xv.data().chunks(c)).enumerate() {
                for ch in 0..c {
                    let xhat = (xrow[ch] - mu[ch]) * inv[ch];
                    dg[ch] += grow[ch] * xhat;
                    db[ch] += grow[ch];
                    if need[0] {
                        dx[r * c + ch] = grow[ch] * inv[ch] * gv.data()[ch];
                    }
                }
            }
            vec![
                need[0].then(|| tensor(xv.shape(), dx)),
                need[1].then(|| tensor(gv.shape(), dg)),
                need[2].then(|| tensor(bv.shape(), db)),
            ]
        }))
    }

    /// Batch normalization with statistics of the current batch (biased
    /// variance over all leading axes). Returns the output together with the
    /// batch mean and variance.
    pub fn batch_norm_batch(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.last_dim();
        ensure!(
            gv.len() == c && bv.len() == c,
            "batch norm parameters must have {} channels",
            c
        );
        let (mu, var) = channel_stats(&xv);
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xv.to_vec();
        for row in xhat.chunks_mut(c) {
            for ch in 0..c {
                row[ch] = (row[ch] - mu[ch]) * inv[ch];
            }
        }
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *v = *v * g + b;
            }
        }
        let (mean_t, var_t) = (tensor(&[c], mu), tensor(&[c], var));
        let shape = xv.shape().to_vec();
        let var_out = self.custom(tensor(&shape, out), &[x, gamma, beta], move |g, need| {
            let n = T::of((xhat.len() / c) as f64);
            let mut sum_dxhat = vec![T::zero(); c];
            let mut sum_dxhat_xhat = vec![T::zero(); c];
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (grow, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                for ch in 0..c {
                    let dxh = grow[ch] * gv.data()[ch];
                    sum_dxhat[ch] += dxh;
                    sum_dxhat_xhat[ch] += dxh * hrow[ch];
                    dg[ch] += grow[ch] * hrow[ch];
                    db[ch] += grow[ch];
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); xhat.len()];
                for (r, (grow, hrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                    for ch in 0..c {
                        let dxh = grow[ch] * gv.data()[ch];
                        dx[r * c + ch] =
                            inv[ch] / n * (n * dxh - sum_dxhat[ch] - hrow[ch] * sum_dxhat_xhat[ch]);
                    }
                }
                tensor(&shape, dx)
            });
            vec![
                dx,
                need[1].then(|| tensor(gv.shape(), dg)),
                need[2].then(|| tensor(bv.shape(), db)),
            ]
        });
        Ok((var_out, mean_t, var_t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_depthwise(k: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[k, k, c], |i| if i / c == (k * k) / 2 { 1.0 } else { 0.0 })
    }

    fn identity_pointwise(c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, c, c], |i| if i / c == i % c { 1.0 } else { 0.0 })
    }

    #[test]
    fn sepconv_identity_kernels() {
        let x = Tensor::from_fn(&[1, 4, 4, 2], |i| (i as f64 * 0.3).sin());
        let y = sepconv2d(&x, &delta_depthwise(3, 2), &identity_pointwise(2), Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn sepconv_all_ones_hand_convolution() {
        let x = Tensor::full(&[1, 3, 3, 1], 1.0f64);
        let dw = Tensor::full(&[3, 3, 1], 1.0);
        let pw = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = sepconv2d(&x, &dw, &pw, Padding::Same).unwrap();
        assert_eq!(y.at4(0, 1, 1, 0), 9.0);
        for (h, w) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at4(0, h, w, 0), 4.0);
        }
        assert_eq!(y.at4(0, 0, 1, 0), 6.0);
    }

    #[test]
    fn sepconv_output_shape() {
        let x = Tensor::<f64>::zeros(&[1, 8, 8, 4]);
        let dw = Tensor::zeros(&[3, 3, 4]);
        let pw = Tensor::zeros(&[1, 1, 4, 6]);
        assert_eq!(sepconv2d(&x, &dw, &pw, Padding::Same).unwrap().shape(), &[1, 8, 8, 6]);
    }

    #[test]
    fn sepconv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 8, 8, 4]);
        assert!(sepconv2d(&x, &Tensor::zeros(&[3, 3, 3]), &Tensor::zeros(&[1, 1, 4, 6]), Padding::Same).is_err());
        assert!(sepconv2d(&x, &Tensor::zeros(&[3, 3, 4]), &Tensor::zeros(&[1, 1, 5, 6]), Padding::Same).is_err());
        assert!(sepconv2d(&x, &Tensor::zeros(&[3, 3, 4]), &Tensor::zeros(&[3, 3, 4, 6]), Padding::Same).is_err());
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::full(&[1, 2, 2, 1], 3.5f64);
        let y = upsample_bilinear_x2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 1]);
        assert!(y.data().iter().all(|&v| v == 3.5));

        let x = Tensor::new(&[1, 1, 2, 1], vec![0.0f64, 1.0]).unwrap();
        let y = upsample_bilinear_x2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 1]);
        for row in y.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }

        let x = Tensor::<f32>::zeros(&[1, 16, 16, 8]);
        assert_eq!(upsample_bilinear_x2(&x).unwrap().shape(), &[1, 32, 32, 8]);
    }

    #[test]
    fn max_pool_shapes_and_values() {
        let x = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let y = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let y = max_pool2d(&x, 3, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 1]);
        assert_eq!(y.at4(0, 0, 0, 0), 5.0);
        assert_eq!(y.at4(0, 3, 3, 0), 15.0);
    }

    #[test]
    fn batch_norm_modes_agree_when_running_stats_equal_batch_stats() {
        let tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[2, 3, 3, 2], |i| (i as f64 * 0.77).sin() * 3.0 + 1.0);
        let x = tape.leaf(xv.clone());
        let g = tape.leaf(Tensor::new(&[2], vec![1.5, 0.5]).unwrap());
        let b = tape.leaf(Tensor::new(&[2], vec![0.1, -0.2]).unwrap());
        let (yb, mean, var) = tape.batch_norm_batch(x, g, b, 1e-5).unwrap();
        let yf = tape.batch_norm_fixed(x, g, b, &mean, &var, 1e-5).unwrap();
        assert!(tape.value(yb).max_abs_diff(&tape.value(yf)) < 1e-12);
    }
}
