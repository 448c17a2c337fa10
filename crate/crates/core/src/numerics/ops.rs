//! Elementwise, reduction, matrix and normalization operations.

use super::{Real, Tape, Tensor, Var};
use crate::error::{ensure, Result};

pub(crate) fn tensor<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced a consistent shape")
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax_rowwise<T: Real>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    ensure!(
        axis < logits.rank(),
        "softmax axis {} out of range for shape {:?}",
        axis,
        logits.shape()
    );
    let shape = logits.shape();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                out[base + j * inner] /= total;
            }
        }
    }
    Ok(tensor(shape, out))
}

fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = y.shape();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (yv, gv) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot += yv[base + j * inner] * gv[base + j * inner];
            }
            for j in 0..n {
                let idx = base + j * inner;
                dx[idx] = yv[idx] * (gv[idx] - dot);
            }
        }
    }
    tensor(shape, dx)
}

/// Divides every row (last axis) by `max(‖row‖₂, min_norm)`.
pub fn l2_normalize_rows<T: Real>(x: &Tensor<T>, min_norm: T) -> Tensor<T> {
    let c = x.last_dim();
    let mut out = x.to_vec();
    for row in out.chunks_mut(c.max(1)) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(min_norm);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    tensor(x.shape(), out)
}

/// Matrix product of 2-D tensors with optional transposes.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    ensure!(
        k == k2,
        "matmul inner dimension mismatch: {:?}{} x {:?}{}",
        a.shape(),
        if trans_a { "ᵀ" } else { "" },
        b.shape(),
        if trans_b { "ᵀ" } else { "" }
    );
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), trans_a, b.data(), trans_b, &mut out, false);
    Ok(tensor(&[m, n], out))
}

/// Batched matrix product of `(batch, rows, cols)` tensors.
pub fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    ensure!(
        a.rank() == 3 && b.rank() == 3 && a.shape()[0] == b.shape()[0],
        "bmm needs equal-batch rank-3 operands, got {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    let batch = a.shape()[0];
    let (ar, ac) = (a.shape()[1], a.shape()[2]);
    let (br, bc) = (b.shape()[1], b.shape()[2]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    ensure!(k == k2, "bmm inner dimension mismatch: {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            &a.data()[i * ar * ac..(i + 1) * ar * ac],
            trans_a,
            &b.data()[i * br * bc..(i + 1) * br * bc],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    Ok(tensor(&[batch, m, n], out))
}

/// Gradients of `C = op(A)·op(B)` given `dC`, in A's and B's storage layout.
fn matmul_grads<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
    need: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let da = need[0].then(|| {
        if trans_a {
            matmul(b, dc, trans_b, true)
        } else {
            matmul(dc, b, false, !trans_b)
        }
        .expect("shapes checked in forward")
    });
    let db = need[1].then(|| {
        if trans_b {
            matmul(dc, a, true, trans_a)
        } else {
            matmul(a, dc, !trans_a, false)
        }
        .expect("shapes checked in forward")
    });
    vec![da, db]
}

impl<T: Real> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.custom(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.custom(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.custom(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&bv, |x, y| x * y).unwrap()),
                need[1].then(|| g.zip_map(&av, |x, y| x * y).unwrap()),
            ]
        }))
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.custom(out, &[a], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    /// Multiplication by a one-element tensor variable.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        ensure!(sv.len() == 1, "scale_by needs a scalar, got {:?}", sv.shape());
        let k = sv.data()[0];
        let out = av.map(|x| x * k);
        let s_shape = sv.shape().to_vec();
        Ok(self.custom(out, &[a, s], move |g, need| {
            vec![
                need[0].then(|| g.map(|v| v * k)),
                need[1].then(|| {
                    let d: T = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).sum();
                    Tensor::full(&s_shape, d)
                }),
            ]
        }))
    }

    /// Adds a `(channels,)` bias along the last axis.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.last_dim();
        ensure!(
            bv.len() == c,
            "bias of length {} does not match {} channels",
            bv.len(),
            c
        );
        let mut out = xv.to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let b_shape = bv.shape().to_vec();
        Ok(self.custom(tensor(xv.shape(), out), &[x, bias], move |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| {
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    tensor(&b_shape, db)
                }),
            ]
        }))
    }

    pub fn relu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.map(|v| v.max(T::zero()));
        self.custom(out, &[x], move |g, _| {
            vec![Some(
                g.zip_map(&xv, |gv, v| if v > T::zero() { gv } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.reshape(shape)?;
        let orig = xv.shape().to_vec();
        Ok(self.custom(out, &[x], move |g, _| vec![Some(g.reshape(&orig).unwrap())]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        self.custom(Tensor::scalar(xv.sum()), &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = T::of(self.value(x).len().max(1) as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    pub fn sum_squares(&self, x: Var) -> Var {
        let xv = self.value(x);
        self.custom(Tensor::scalar(xv.sum_squares()), &[x], move |g, _| {
            let k = g.data()[0] + g.data()[0];
            vec![Some(xv.map(|v| v * k))]
        })
    }

    /// Sum of one-element tensors.
    pub fn add_scalars(&self, parts: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &p in parts {
            let v = self.value(p);
            ensure!(v.len() == 1, "add_scalars needs scalars, got {:?}", v.shape());
            total += v.data()[0];
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p)).collect();
        Ok(self.custom(Tensor::scalar(total), parts, move |g, _| {
            shapes
                .iter()
                .map(|s| Some(Tensor::full(s, g.data()[0])))
                .collect()
        }))
    }

    pub fn matmul(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = matmul(&av, &bv, trans_a, trans_b)?;
        Ok(self.custom(out, &[a, b], move |g, need| {
            matmul_grads(&av, &bv, g, trans_a, trans_b, need)
        }))
    }

    pub fn bmm(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = bmm(&av, &bv, trans_a, trans_b)?;
        Ok(self.custom(out, &[a, b], move |g, need| {
            let batch = av.shape()[0];
            let a2 = [av.shape()[1], av.shape()[2]];
            let b2 = [bv.shape()[1], bv.shape()[2]];
            let g2 = [g.shape()[1], g.shape()[2]];
            let mut da = Vec::with_capacity(if need[0] { av.len() } else { 0 });
            let mut db = Vec::with_capacity(if need[1] { bv.len() } else { 0 });
            for i in 0..batch {
                let ai = av.slice_rows(i, i + 1).unwrap().reshape(&a2).unwrap();
                let bi = bv.slice_rows(i, i + 1).unwrap().reshape(&b2).unwrap();
                let gi = g.slice_rows(i, i + 1).unwrap().reshape(&g2).unwrap();
                let grads = matmul_grads(&ai, &bi, &gi, trans_a, trans_b, need);
                if let Some(t) = &grads[0] {
                    da.extend_from_slice(t.data());
                }
                if let Some(t) = &grads[1] {
                    db.extend_from_slice(t.data());
                }
            }
            vec![
                need[0].then(|| tensor(av.shape(), da)),
                need[1].then(|| tensor(bv.shape(), db)),
            ]
        }))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let y = softmax_rowwise(&self.value(x), axis)?;
        let saved = y.clone();
        Ok(self.custom(y, &[x], move |g, _| vec![Some(softmax_backward(&saved, g, axis))]))
    }

    /// Row-wise L2 normalization along the last axis with a norm floor.
    pub fn l2_normalize(&self, x: Var, min_norm: T) -> Var {
        let xv = self.value(x);
        let y = l2_normalize_rows(&xv, min_norm);
        let saved = y.clone();
        self.custom(y, &[x], move |g, _| {
            let c = xv.last_dim().max(1);
            let mut dx = vec![T::zero(); xv.len()];
            for (((dxr, xr), yr), gr) in dx
                .chunks_mut(c)
                .zip(xv.data().chunks(c))
                .zip(saved.data().chunks(c))
                .zip(g.data().chunks(c))
            {
                let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > min_norm {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / norm;
                    }
                } else {
                    for (d, &gv) in dxr.iter_mut().zip(gr) {
                        *d = gv / min_norm;
                    }
                }
            }
            vec![Some(tensor(xv.shape(), dx))]
        })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        for v in &values {
            ensure!(
                &v.shape()[..v.rank() - 1] == lead,
                "concat leading dims mismatch {:?} vs {:?}",
                v.shape(),
                values[0].shape()
            );
        }
        let widths: Vec<usize> = values.iter().map(Tensor::last_dim).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.custom(tensor(&shape, out), parts, move |g, need| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                if need[i] {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    grads.push(Some(tensor(&shapes[i], d)));
                } else {
                    grads.push(None);
                }
                offset += w;
            }
            grads
        }))
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.slice_rows(start, end)?;
        let inner: usize = xv.shape()[1..].iter().product();
        let shape = xv.shape().to_vec();
        Ok(self.custom(out, &[x], move |g, _| {
            let mut d = vec![T::zero(); shape.iter().product()];
            d[start * inner..end * inner].copy_from_slice(g.data());
            vec![Some(tensor(&shape, d))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax_rowwise(&t, 1).unwrap().data(), &[0.5, 0.5]);

        let t = Tensor::new(&[1, 2], vec![20.0f64, 0.0]).unwrap();
        let y = softmax_rowwise(&t, 1).unwrap();
        let e = 20f64.exp();
        assert!((y.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((1.0 - y.data()[0] - 2.06e-9).abs() < 1e-11);

        let t = Tensor::new(&[1, 2], vec![1000.0f32, 0.0]).unwrap();
        let y = softmax_rowwise(&t, 1).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let t = Tensor::new(&[2, 3], vec![1.0f64, 2.0, 3.0, 1.0, 0.0, 3.0]).unwrap();
        let y = softmax_rowwise(&t, 0).unwrap();
        for j in 0..3 {
            assert!((y.data()[j] + y.data()[3 + j] - 1.0).abs() < 1e-12);
        }
        assert!((y.data()[2] - 0.5).abs() < 1e-12);
        assert!(softmax_rowwise(&t, 2).is_err());
    }

    #[test]
    fn matmul_shape_errors() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matmul(&a, &b, false, false).is_err());
        assert_eq!(matmul(&a, &b, false, true).unwrap().shape(), &[2, 2]);
        assert_eq!(matmul(&a, &b, true, false).unwrap().shape(), &[3, 3]);
    }

    #[test]
    fn normalize_handles_zero_rows() {
        let t = Tensor::new(&[2, 2], vec![3.0f64, 4.0, 0.0, 0.0]).unwrap();
        let y = l2_normalize_rows(&t, 1e-8);
        assert_eq!(y.data(), &[0.6, 0.8, 0.0, 0.0]);
    }
}
