//! Dense n-dimensional tensors over a flat row-major buffer.
//!
//! Shape-mismatch and bad-index preconditions panic with a descriptive
//! message; non-finite values are the caller's concern (the tape flags them
//! as numeric faults as ops are recorded).

use std::fmt;

/// Element type. 64-bit by default; the `f32` cargo feature switches the
/// whole crate to 32-bit floats for faster training at looser tolerances.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<Scalar>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            data.len(),
            "tensor shape {shape:?} wants {expect} elements, got {}",
            data.len()
        );
        Tensor { shape, data }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: Scalar) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Scalar {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        let expect: usize = shape.iter().product();
        assert_eq!(
            expect,
            self.len(),
            "cannot reshape {:?} ({} elems) to {shape:?}",
            self.shape,
            self.len()
        );
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(Scalar, Scalar) -> Scalar) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn div_elem(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn scale(&self, c: Scalar) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> Scalar {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Scalar {
        assert!(!self.is_empty(), "mean of empty tensor");
        self.sum() / self.len() as Scalar
    }

    pub fn dot(&self, other: &Tensor) -> Scalar {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn l2_norm(&self) -> Scalar {
        self.dot(self).sqrt()
    }

    pub fn l1_norm(&self) -> Scalar {
        self.data.iter().map(|v| v.abs()).sum()
    }

    /// Largest absolute elementwise difference.
    pub fn linf_dist(&self, other: &Tensor) -> Scalar {
        assert_eq!(self.shape, other.shape, "linf_dist shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }

    /// 2-D matrix product: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 2, "matmul lhs must be rank 2, got {:?}", self.shape);
        assert_eq!(other.rank(), 2, "matmul rhs must be rank 2, got {:?}", other.shape);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[kk * n..(kk + 1) * n];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Tensor { shape: vec![m, n], data: out }
    }

    /// 2-D transpose.
    pub fn transposed(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose needs rank 2, got {:?}", self.shape);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// General axis permutation.
    pub fn permuted(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.rank(), "permute axes {axes:?} vs rank {}", self.rank());
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            assert!(a < axes.len() && !seen[a], "invalid permutation {axes:?}");
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let out_strides = strides(&out_shape);
        let mut out = vec![0.0; self.len()];
        let mut idx = vec![0usize; self.rank()];
        for (flat_out, slot) in out.iter_mut().enumerate() {
            // decode output index, map to input coordinates
            let mut rem = flat_out;
            for (d, s) in out_strides.iter().enumerate() {
                idx[d] = rem / s;
                rem %= s;
            }
            let mut flat_in = 0;
            for (d, &a) in axes.iter().enumerate() {
                flat_in += idx[d] * in_strides[a];
            }
            *slot = self.data[flat_in];
        }
        Tensor { shape: out_shape, data: out }
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[Scalar] {
        assert_eq!(self.rank(), 2, "row() needs rank 2");
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    /// Slice out example `i` of a batched tensor `[n, d...] -> [d...]`.
    pub fn example(&self, i: usize) -> Tensor {
        assert!(self.rank() >= 1, "example() needs a batch dimension");
        let per: usize = self.shape[1..].iter().product();
        assert!(i < self.shape[0], "example {i} out of {}", self.shape[0]);
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stack equally-shaped tensors along a fresh leading axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of nothing");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor { shape, data }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const MAX: usize = 12;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(MAX).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.len() > MAX {
            write!(f, ", ... {} more", self.len() - MAX)?;
        }
        write!(f, "]")
    }
}
