use std::fmt;

use crate::scalar::Scalar;

/// Batch/channel/spatial extents of a 5-D tensor. Spatial order is
/// `(x, y, z)` with `x` varying fastest in memory; a 2-D image is a volume
/// with `z = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub spatial: [usize; 3],
}

impl Dims {
    pub fn new(n: usize, c: usize, spatial: [usize; 3]) -> Self {
        Self { n, c, spatial }
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.voxels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_spatial(self, spatial: [usize; 3]) -> Self {
        Self { spatial, ..self }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x, y, z] = self.spatial;
        write!(f, "{}x{}x{}x{}x{}", self.n, self.c, x, y, z)
    }
}

/// Dense row-major tensor laid out `[n][c][z][y][x]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(dims.len(), data.len(), "tensor data does not match dims {dims}");
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    /// Contiguous `[c][voxels]` block of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let stride = self.dims.c * self.dims.voxels();
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let stride = self.dims.c * self.dims.voxels();
        &mut self.data[n * stride..(n + 1) * stride]
    }

    /// One spatial channel plane of one batch item.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let v = self.dims.voxels();
        let off = (n * self.dims.c + c) * v;
        &self.data[off..off + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let v = self.dims.voxels();
        let off = (n * self.dims.c + c) * v;
        &mut self.data[off..off + v]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Numeric conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
