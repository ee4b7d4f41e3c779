use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense tensor in NCHW layout (a flat vector is `[n, 1, 1, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: [usize; 4],
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: [usize; 4], data: Vec<F>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} holds {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: F) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor {
            shape: [data.len(), 1, 1, 1],
            data,
        }
    }

    pub fn scalar(v: F) -> Self {
        Self::from_vec(vec![v])
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Same values, different shape of equal size.
    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::DimensionMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> F {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| G::lit(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Slice of sample `n` (all channels and pixels).
    pub fn sample(&self, n: usize) -> &[F] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * per..(n + 1) * per]
    }
}
