use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

/// Dense row-major n-dimensional array.
///
/// A rank-0 tensor (empty shape) holds a single scalar. Most operations view a
/// tensor as a matrix of `rows() x cols()`, where `cols()` is the extent of the
/// last axis and `rows()` the product of all others.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
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

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise `self += other`. Shapes must hold the same number of elements.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: T) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    /// Sum of squares, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| x.f64() * x.f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        if self.shape != other.shape {
            return false;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (&x, &y) in self.data.iter().zip(&other.data) {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            if a != b {
                return false;
            }
        }
        true
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Tensor {
            shape: vec![c, r],
            data: crate::kernels::transpose(&self.data, r, c),
        }
    }
}

/// Sinusoidal position encodings, `[len, dim]`.
///
/// Even columns hold `sin(pos / 10000^(2i/dim))`, odd columns the matching cosine.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data.push(T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor {
        shape: vec![len, dim],
        data,
    }
}
