use std::fmt;
use std::sync::Arc;

use super::Real;
use crate::error::{ensure, Result};

/// Dense row-major tensor with immutable, shared storage.
///
/// Spatial tensors are laid out `(batch, height, width, channels)`;
/// token matrices use `(rows, cols)` and batched matrices
/// `(batch, rows, cols)`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        ensure!(
            expected == data.len(),
            "shape {:?} needs {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Last dimension (channels for spatial tensors, columns for matrices).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// `(batch, height, width, channels)`; errors unless rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        ensure!(
            self.shape.len() == 4,
            "expected a (batch, height, width, channels) tensor, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        ensure!(
            self.shape.len() == 2,
            "expected a matrix, got shape {:?}",
            self.shape
        );
        Ok((self.shape[0], self.shape[1]))
    }

    /// Same storage viewed under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.len(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn at4(&self, b: usize, h: usize, w: usize, c: usize) -> T {
        let s = &self.shape;
        self.data[((b * s[1] + h) * s[2] + w) * s[3] + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            "shape mismatch {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::of(x.as_f64())).collect()),
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Takes the storage, copying only if it is shared.
    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Concatenates tensors along the first axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        ensure!(!parts.is_empty(), "cannot stack zero tensors");
        let inner = &parts[0].shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        let mut rows = 0;
        for p in parts {
            ensure!(
                &p.shape[1..] == inner,
                "stack shape mismatch {:?} vs {:?}",
                p.shape,
                parts[0].shape
            );
            rows += p.shape[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(inner);
        Tensor::new(&shape, data)
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        ensure!(
            start <= end && end <= self.shape[0],
            "row range {}..{} out of bounds for {:?}",
            start,
            end,
            self.shape
        );
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(&shape, self.data[start * inner..end * inner].to_vec())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &std::any::type_name::<T>())
            .field("head", &preview)
            .finish()
    }
}
