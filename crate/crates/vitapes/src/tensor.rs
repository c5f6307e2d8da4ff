//! Dense rank-1..3 `f64` tensor used as the universal numeric carrier.
//!
//! Rank-2 matrices (`[rows, cols]`, row-major) cover almost all of the
//! math; rank-3 is used for `[channels, side, side]` images.

use crate::error::{Result, VitapesError};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorF {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(VitapesError::Shape(format!(
                "rank must be 1..=3, got {}",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(VitapesError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(TensorF { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        TensorF {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        TensorF {
            shape,
            data: vec![value; n],
        }
    }

    /// Identity matrix, rank-2.
    pub fn eye(n: usize) -> Self {
        let mut t = TensorF::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// i.i.d. standard normal entries.
    pub fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        TensorF { shape, data }
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn_scaled<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let mut t = Self::randn(shape, rng);
        for v in &mut t.data {
            *v *= std;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor (or rank-1 treated as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-3 tensor"),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-3 tensor"),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[c * h * w + i * w + j]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[c * h * w + i * w + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    /// Matrix product of two rank-2 tensors via a blocked dgemm kernel.
    pub fn matmul(&self, other: &TensorF) -> Result<TensorF> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(VitapesError::Shape("matmul requires rank-2 operands".into()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(VitapesError::Shape(format!(
                "matmul inner dims disagree: {}x{} . {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = TensorF::zeros(vec![m, n]);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }

    pub fn transpose(&self) -> TensorF {
        assert_eq!(self.rank(), 2, "transpose requires rank-2");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = TensorF::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn add(&self, other: &TensorF) -> Result<TensorF> {
        if self.shape != other.shape {
            return Err(VitapesError::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(TensorF {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &TensorF) -> Result<TensorF> {
        if self.shape != other.shape {
            return Err(VitapesError::Shape(format!(
                "sub shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(TensorF {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, c: f64) -> TensorF {
        TensorF {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> TensorF {
        TensorF {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &TensorF) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Vertical stack of rank-2 tensors with equal widths.
    pub fn concat_rows(parts: &[&TensorF]) -> Result<TensorF> {
        if parts.is_empty() {
            return Err(VitapesError::Shape("concat_rows of nothing".into()));
        }
        let w = parts[0].cols();
        let mut rows = 0;
        for p in parts {
            if p.rank() != 2 || p.cols() != w {
                return Err(VitapesError::Shape(format!(
                    "concat_rows width mismatch: expected {}, got {:?}",
                    w,
                    p.shape()
                )));
            }
            rows += p.rows();
        }
        let mut data = Vec::with_capacity(rows * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(TensorF {
            shape: vec![rows, w],
            data,
        })
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<TensorF> {
        if self.rank() != 2 {
            return Err(VitapesError::Shape("gather_rows requires rank-2".into()));
        }
        let w = self.cols();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.rows() {
                return Err(VitapesError::Shape(format!(
                    "gather_rows index {} out of {} rows",
                    i,
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(TensorF {
            shape: vec![idx.len(), w],
            data,
        })
    }

    /// Bit-exact equality (f64 bit patterns), used by determinism checks.
    pub fn bits_eq(&self, other: &TensorF) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
