//! Dense 64-bit linear algebra used throughout the engine.
//!
//! Everything here is a pure function over borrowed data. Summations run
//! left to right so results are bit-reproducible across runs.

use crate::error::{Error, Result};

/// Norms below this are treated as degenerate.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-30;

/// Vectors whose norm is this close to one are returned unchanged by
/// [`l2_normalize`], which makes normalization idempotent.
const UNIT_SLACK: f64 = 4.0 * f64::EPSILON;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a `d x columns.len()` matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(Error::DimensionMismatch("no columns given".into()));
        };
        let rows = first.len();
        let cols = columns.len();
        let mut data = vec![0.0; rows * cols];
        for (c, column) in columns.iter().enumerate() {
            if column.len() != rows {
                return Err(Error::DimensionMismatch(format!(
                    "column {c} has length {}, expected {rows}",
                    column.len()
                )));
            }
            for (r, &x) in column.iter().enumerate() {
                data[r * cols + c] = x;
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|c| self.column(c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows, "column length");
        for (r, &x) in values.iter().enumerate() {
            self.set(r, c, x);
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn scaled(&self, factor: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// `self += factor * outer(left, right)`.
    pub fn add_outer(&mut self, factor: f64, left: &[f64], right: &[f64]) {
        assert_eq!(left.len(), self.rows);
        assert_eq!(right.len(), self.cols);
        for (r, &l) in left.iter().enumerate() {
            let scaled = factor * l;
            if scaled == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (dst, &x) in row.iter_mut().zip(right) {
                *dst += scaled * x;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dot product.
///
/// Panics if the slices differ in length.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot product of unequal lengths");
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vector to normalize".into()));
    }
    let n = norm(v);
    if !(n >= ZERO_NORM_THRESHOLD) {
        return Err(Error::ZeroNorm(format!("norm {n:e}")));
    }
    if (n - 1.0).abs() <= UNIT_SLACK {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalizes `v`, returning the unit vector and the original norm.
pub(crate) fn normalize_with_norm(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let unit = l2_normalize(v)?;
    Ok((unit, norm(v)))
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let a = l2_normalize(a)?;
    let b = l2_normalize(b)?;
    Ok(dot(&a, &b).clamp(-1.0, 1.0))
}

/// `W v`.
pub fn matvec(w: &Mat, v: &[f64]) -> Result<Vec<f64>> {
    if w.cols != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix times vector of length {}",
            w.rows,
            w.cols,
            v.len()
        )));
    }
    Ok((0..w.rows).map(|r| dot(w.row(r), v)).collect())
}

/// `W^T v`, accumulating over rows in order.
pub fn matvec_t(w: &Mat, v: &[f64]) -> Result<Vec<f64>> {
    if w.rows != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "transpose of {}x{} matrix times vector of length {}",
            w.rows,
            w.cols,
            v.len()
        )));
    }
    let mut out = vec![0.0; w.cols];
    for (r, &x) in v.iter().enumerate() {
        for (o, &m) in out.iter_mut().zip(w.row(r)) {
            *o += m * x;
        }
    }
    Ok(out)
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log(sum(exp(x)))` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let total: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + total.ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
