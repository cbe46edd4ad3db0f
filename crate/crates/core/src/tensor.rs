//! Dense row-major N-d arrays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Dense tensor with contiguous row-major storage.
///
/// Operations never mutate their inputs; the only in-place writes go through
/// [`Tensor::data_mut`], which the optimizer and layer kernels use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Integer companion of [`Tensor`] holding indices, e.g. argmax positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexTensor {
    shape: Vec<usize>,
    data: Vec<usize>,
}

impl IndexTensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<usize>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "{} indices for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of the given shape with every element set to `fill`.
    pub fn new(shape: &[usize], fill: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor by evaluating `f` at every row-major linear index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Linear offset of a coordinate, or `None` if it is out of bounds.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        let mut stride = 1;
        for (&i, &d) in index.iter().zip(&self.shape).rev() {
            if i >= d {
                return None;
            }
            off += i * stride;
            stride *= d;
        }
        Some(off)
    }

    /// Inverse of [`Tensor::offset`].
    pub fn coords(&self, mut offset: usize) -> Vec<usize> {
        let mut out = vec![0; self.shape.len()];
        for (slot, &d) in out.iter_mut().zip(&self.shape).rev() {
            *slot = offset % d;
            offset /= d;
        }
        out
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|o| self.data[o])
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let out = Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        out.ensure_finite("map")?;
        Ok(out)
    }

    /// Elementwise `f(a_i, b_i)` over two tensors of identical shape.
    pub fn map_zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let out = Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        out.ensure_finite("map_zip")?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.map_zip(other, |a, b| a + b)
    }

    /// Maximum along `axis` with the removed axis' argmax.
    ///
    /// Ties resolve to the lowest index along the axis. Reducing a rank-1
    /// tensor yields shape `[1]`.
    pub fn reduce_max(&self, axis: usize) -> Result<(Self, IndexTensor)> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut values = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for i in 0..inner {
                let mut best = self.data[base + i];
                let mut best_idx = 0;
                for a in 1..extent {
                    let v = self.data[base + a * inner + i];
                    if v > best {
                        best = v;
                        best_idx = a;
                    }
                }
                values.push(best);
                argmax.push(best_idx);
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok((
            Self::from_vec(&shape, values)?,
            IndexTensor::from_vec(shape, argmax)?,
        ))
    }

    /// Picks, for each position of `index`, the element at that index along
    /// `axis`. `index` must have this tensor's shape with `axis` removed.
    pub fn gather(&self, axis: usize, index: &IndexTensor) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        if index.data.len() != outer * inner {
            return Err(Error::shape(format!(
                "index shape {:?} does not match {:?} without axis {axis}",
                index.shape, self.shape
            )));
        }
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let a = index.data[o * inner + i];
                if a >= extent {
                    return Err(Error::invalid(format!("index {a} >= extent {extent}")));
                }
                out.push(self.data[(o * extent + a) * inner + i]);
            }
        }
        Self::from_vec(&index.shape, out)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "inner dimensions {k} and {k2} differ"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            (k, 1),
            &other.data,
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let out = Self::from_vec(&[m, n], out)?;
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose2 needs a rank-2 tensor"));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Self::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r])
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Converts the element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }
}
