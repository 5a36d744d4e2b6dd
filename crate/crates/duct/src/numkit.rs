//! Dense numerical substrate: row-major f64 matrices, a seeded
//! platform-independent RNG, norms, pairwise distances and cosine similarity.
//!
//! Everything here is double precision and deliberately dense; model sizes
//! in this crate are tiny and the Sinkhorn / finite-difference machinery
//! needs the headroom.

use crate::error::{DuctError, Result};

/// Default guard for norm denominators.
pub const EPS: f64 = 1e-12;

/// Row-major dense matrix of finite f64 values.
///
/// Immutable by convention after construction; all operations return new
/// matrices. NaN and infinities are rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DuctError::Shape(format!(
                "matrix {rows}x{cols} requires {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DuctError::Domain("non-finite matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        if rows.iter().any(|v| v.len() != c) {
            return Err(DuctError::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Element-wise `self + scale * other`.
    pub fn add_scaled(&self, other: &Matrix, scale: f64) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(DuctError::Shape(format!(
                "add_scaled {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.add_scaled(other, -1.0)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|v| v * s).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Standard matrix product.
pub fn mat_mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(DuctError::Shape(format!(
            "mat_mul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            for j in 0..b.cols {
                out.data[i * b.cols + j] += aik * b.get(k, j);
            }
        }
    }
    Ok(out)
}

/// Divide each column by max(its L2 norm, eps). Zero columns stay zero.
pub fn l2_normalize_columns(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    for j in 0..m.cols {
        let norm = (0..m.rows).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        for i in 0..m.rows {
            out.set(i, j, m.get(i, j) / denom);
        }
    }
    out
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(DuctError::Shape(format!(
            "pairwise_sq_dist dims {} vs {}",
            a.cols, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let d = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>();
            out.set(i, j, d);
        }
    }
    Ok(out)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity with eps-guarded denominators; zero vectors yield 0.
pub fn cosine_sim(u: &[f64], v: &[f64], eps: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(DuctError::Shape(format!(
            "cosine_sim lengths {} vs {}",
            u.len(),
            v.len()
        )));
    }
    Ok(dot(u, v) / (l2_norm(u).max(eps) * l2_norm(v).max(eps)))
}

/// Seeded deterministic RNG (SplitMix64 core).
///
/// The stream is a pure function of the seed and the number of draws, with
/// no platform dependence, so checkpointing the single u64 state is enough
/// to resume a run bit-identically.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive an independent sub-stream, e.g. one per training stage.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut r = Rng::new(seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15));
        r.next_u64(); // decorrelate from raw xor
        r
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Self {
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}
