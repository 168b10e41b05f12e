use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Rank-3 tensors of shape `[H, W, C]` double as cell grids; because storage
/// is row-major the same buffer is also an `(H*W) x C` matrix, which is how
/// the per-cell MLPs consume it.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero-sized dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element `[i, j, k]` of a rank-3 tensor.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        let (w, c) = (self.shape[1], self.shape[2]);
        self.data[(i * w + j) * c + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let (w, c) = (self.shape[1], self.shape[2]);
        self.data[(i * w + j) * c + k] = value;
    }

    /// Copy of channels `start..start + len` of the trailing axis.
    pub fn channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.cols();
        if start + len > c || len == 0 {
            return Err(Error::dim("channels", &self.shape, &[start, len]));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        let data = self
            .data
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(Tensor { shape, data })
    }

    /// Rotates the two leading (spatial) axes of a rank-3 tensor by 90 degrees
    /// counter-clockwise: `out[i][j] = in[j][W-1-i]`.
    pub fn rot90(&self) -> Tensor {
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = Tensor::zeros(&[w, h, c]);
        for i in 0..w {
            for j in 0..h {
                for k in 0..c {
                    out.set3(i, j, k, self.at3(j, w - 1 - i, k));
                }
            }
        }
        out
    }

    /// Mirrors a rank-3 tensor left-to-right.
    pub fn flip_columns(&self) -> Tensor {
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = Tensor::zeros(&[h, w, c]);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out.set3(i, w - 1 - j, k, self.at3(i, j, k));
                }
            }
        }
        out
    }

    /// Mirrors a rank-3 tensor top-to-bottom.
    pub fn flip_rows(&self) -> Tensor {
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = Tensor::zeros(&[h, w, c]);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out.set3(h - 1 - i, j, k, self.at3(i, j, k));
                }
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}
