//! Dense row-major tensor values. Plain data, no graph bookkeeping; the
//! autograd tape in [`crate::graph`] wraps these.

use crate::error::{Error, Result};
use crate::real::Real;
use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * w);
        for r in rows {
            if r.len() != w {
                return Err(Error::Shape(format!(
                    "ragged rows: expected width {}, got {}",
                    w,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, w], data)
    }

    /// Gaussian(0, std) entries from the given generator.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut StdRng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Number of rows / row width when viewed as a 2-D matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected 2-D tensor, got {:?}", other))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        let w = self.shape[1];
        self.data[i * w + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        let w = self.shape[1];
        self.data[i * w + j] = v;
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        for x in &mut self.data {
            *x = v;
        }
    }

    /// Width of the last dimension; 1 for scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
