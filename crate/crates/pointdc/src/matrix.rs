//! Dense row-major f64 matrices.
//!
//! One matrix type backs everything that is "rows of D-dimensional vectors"
//! in the pipeline: point features, super-voxel features, cluster centroids,
//! network weights and their gradients.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {rows}x{cols} = {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// self += a * other, elementwise.
    pub fn axpy(&mut self, a: f64, other: &FeatureMatrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    /// C = self * rhs^T, where self: n x k and rhs: m x k. Result n x m.
    ///
    /// The shared inner dimension runs along rows of both operands, so both
    /// sides stream contiguously.
    pub fn matmul_nt(&self, rhs: &FeatureMatrix) -> FeatureMatrix {
        assert_eq!(self.cols, rhs.cols, "inner dimension mismatch");
        let mut out = FeatureMatrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = out.row_mut(i);
            for (j, d) in dst.iter_mut().enumerate() {
                *d = dot(a, rhs.row(j));
            }
        }
        out
    }

    /// C = self^T * rhs, where self: n x p and rhs: n x q. Result p x q.
    pub fn matmul_tn(&self, rhs: &FeatureMatrix) -> FeatureMatrix {
        assert_eq!(self.rows, rhs.rows, "outer dimension mismatch");
        let mut out = FeatureMatrix::zeros(self.cols, rhs.cols);
        for n in 0..self.rows {
            let a = self.row(n);
            let b = rhs.row(n);
            for (o, &coef) in a.iter().enumerate() {
                if coef != 0.0 {
                    axpy(out.row_mut(o), coef, b);
                }
            }
        }
        out
    }

    /// C = self * rhs, where self: n x k and rhs: k x m. Result n x m.
    pub fn matmul_nn(&self, rhs: &FeatureMatrix) -> FeatureMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimension mismatch");
        let mut out = FeatureMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = out.row_mut(i);
            for (k, &coef) in a.iter().enumerate() {
                if coef != 0.0 {
                    axpy(dst, coef, rhs.row(k));
                }
            }
        }
        out
    }

    /// Sum over rows; result has `cols` entries.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            axpy(&mut out, 1.0, r);
        }
        out
    }

    /// L2-normalizes every row in place; zero rows stay zero.
    /// Returns the original row norms.
    pub fn normalize_rows(&mut self) -> Vec<f64> {
        let cols = self.cols;
        let mut norms = Vec::with_capacity(self.rows);
        for r in self.data.chunks_exact_mut(cols.max(1)) {
            let n = norm(r);
            norms.push(n);
            if n > 0.0 {
                r.iter_mut().for_each(|x| *x /= n);
            }
        }
        norms
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// dst += a * src
pub fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Cosine similarity; zero if either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Per-pixel feature image: height x width pixels, each carrying a
/// D-dimensional feature and a validity bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Row-major: pixel (r, c) occupies `[(r*width + c)*dim ..][..dim]`.
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FeatureImage {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
            valid: vec![false; height * width],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let base = (row * self.width + col) * self.dim;
        &mut self.data[base..base + self.dim]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn set_valid(&mut self, row: usize, col: usize, v: bool) {
        self.valid[row * self.width + col] = v;
    }
}
