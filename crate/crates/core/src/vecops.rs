//! Numeric kernel: row normalization, cosine similarity, top-k selection and
//! low percentiles.
//!
//! Cosine similarity is a dot product because rows are normalized once at
//! ingest. Dot products use a fixed blocked accumulation order (eight lanes,
//! lane `j` sums coordinates `i ≡ j (mod 8)`, lanes folded left to right,
//! then the tail), so `cosine_sim`, `sim_matrix` and every batch scorer agree
//! bit for bit.

use std::cmp::Ordering;
use std::ops::Deref;

use thiserror::Error;

use crate::exec::Exec;

/// Row norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on `|‖row‖ - 1|` for a row to count as unit-norm.
pub const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VecError {
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("buffer of {len} floats is not a whole number of {dim}-dimensional rows")]
    RaggedBuffer { len: usize, dim: usize },
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("input is empty")]
    EmptyInput,
    #[error("percentile {0} outside (0, 100]")]
    InvalidPercentile(f64),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

/// Row-major matrix of `f32` embeddings with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self, VecError> {
        if dim == 0 {
            return Err(VecError::ZeroDim);
        }
        if data.len() % dim != 0 {
            return Err(VecError::RaggedBuffer { len: data.len(), dim });
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self, VecError> {
        Self::new(dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self, VecError> {
        let mut m = Self::new(dim, Vec::with_capacity(rows.len() * dim))?;
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<(), VecError> {
        if row.len() != self.dim {
            return Err(VecError::DimMismatch { left: self.dim, right: row.len() });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Copies the listed rows, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, data }
    }

    /// Appends every row of `other`.
    pub fn extend(&mut self, other: &EmbeddingMatrix) -> Result<(), VecError> {
        check_dims(self.dim, other.dim)?;
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    /// Index of the first row containing a NaN or infinity.
    pub fn first_non_finite_row(&self) -> Option<usize> {
        self.iter_rows().position(|r| r.iter().any(|v| !v.is_finite()))
    }

    /// Euclidean norm of row `i`, accumulated in `f64`.
    pub fn row_norm(&self, i: usize) -> f64 {
        norm(self.row(i))
    }

    /// Arithmetic mean of all rows (accumulated in `f64`), or `None` when empty.
    pub fn mean_row(&self) -> Option<Vec<f64>> {
        if self.is_empty() {
            return None;
        }
        let mut acc = vec![0.0f64; self.dim];
        for r in self.iter_rows() {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v as f64;
            }
        }
        let n = self.rows() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Some(acc)
    }
}

fn norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

fn check_dims(left: usize, right: usize) -> Result<(), VecError> {
    if left != right {
        return Err(VecError::DimMismatch { left, right });
    }
    Ok(())
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, VecError> {
    let mut data = Vec::with_capacity(m.data.len());
    for (i, r) in m.iter_rows().enumerate() {
        let n = norm(r);
        if !n.is_finite() {
            return Err(VecError::NonFinite(i));
        }
        if n < ZERO_NORM {
            return Err(VecError::ZeroRow(i));
        }
        data.extend(r.iter().map(|&v| (v as f64 / n) as f32));
    }
    Ok(EmbeddingMatrix { dim: m.dim, data })
}

/// Normalizes a single vector given in `f64`, returning an `f32` row.
pub fn normalize_vec(v: &[f64]) -> Result<Vec<f32>, VecError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < ZERO_NORM {
        return Err(VecError::ZeroRow(0));
    }
    Ok(v.iter().map(|x| (x / n) as f32).collect())
}

const LANES: usize = 8;

/// Dot product with the crate-wide blocked accumulation order.
///
/// Callers must pass equal-length slices.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for j in 0..LANES {
            lanes[j] += a[base + j] * b[base + j];
        }
    }
    let mut sum = lanes.iter().fold(0.0f32, |acc, &v| acc + v);
    for i in chunks * LANES..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// Cosine similarity of two unit rows.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f32, VecError> {
    check_dims(a.len(), b.len())?;
    Ok(dot(a, b))
}

/// Similarities of one row against every row of `m`.
pub fn sims_to_row(m: &EmbeddingMatrix, z: &[f32]) -> Result<Vec<f32>, VecError> {
    check_dims(m.dim, z.len())?;
    Ok(m.iter_rows().map(|r| dot(r, z)).collect())
}

/// Dense `|A| × |B|` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl SimMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> SimMatrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        SimMatrix { rows: self.cols, cols: self.rows, data }
    }
}

/// Batched cosine similarity, parallel over rows of `a` when available.
pub fn sim_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<SimMatrix, VecError> {
    sim_matrix_with(a, b, Exec::default())
}

pub fn sim_matrix_with(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    exec: Exec,
) -> Result<SimMatrix, VecError> {
    check_dims(a.dim, b.dim)?;
    let rows: Vec<Vec<f32>> = exec.map_range(a.rows(), |i| {
        let ai = a.row(i);
        b.iter_rows().map(|bj| dot(ai, bj)).collect()
    });
    Ok(SimMatrix { rows: a.rows(), cols: b.rows(), data: rows.concat() })
}

/// Finite-only score list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreVector(Vec<f32>);

impl ScoreVector {
    pub fn new(values: Vec<f32>) -> Result<Self, VecError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(VecError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl Deref for ScoreVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Highest,
    Lowest,
}

/// Orders scores with `±0` equal and NaN above everything, so sorting never
/// sees an inconsistent comparator.
#[inline]
pub fn cmp_scores(a: f32, b: f32) -> Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| a.total_cmp(&b))
}

/// Indices of the `k` best scores in `direction`, best first.
///
/// Ties go to the lower index. `k > s.len()` returns every index.
pub fn topk_indices(s: &[f32], k: usize, direction: Direction) -> Vec<usize> {
    let k = k.min(s.len());
    if k == 0 {
        return Vec::new();
    }
    let order = |&a: &usize, &b: &usize| {
        let by_score = match direction {
            Direction::Highest => cmp_scores(s[b], s[a]),
            Direction::Lowest => cmp_scores(s[a], s[b]),
        };
        by_score.then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..s.len()).collect();
    if k < s.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx
}

/// Nearest-rank lower percentile: the element at position
/// `ceil(eta / 100 · n) - 1` of the ascending sort (rank clamped to `1..=n`).
pub fn percentile_low(s: &[f32], eta: f64) -> Result<f32, VecError> {
    if !(eta > 0.0 && eta <= 100.0) {
        return Err(VecError::InvalidPercentile(eta));
    }
    if s.is_empty() {
        return Err(VecError::EmptyInput);
    }
    let rank = nearest_rank(s.len(), eta);
    let mut buf = s.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank - 1, |a, b| cmp_scores(*a, *b));
    Ok(*v)
}

/// One-based nearest rank for `eta` percent of `n` items.
pub fn nearest_rank(n: usize, eta: f64) -> usize {
    let r = (eta * n as f64 / 100.0).ceil() as usize;
    r.clamp(1, n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(dim: usize, rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(dim, rows).unwrap()
    }

    #[test]
    fn normalize_three_four() {
        let n = normalize_rows(&m(2, &[&[3.0, 4.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_zero_row_fails() {
        let err = normalize_rows(&m(2, &[&[1.0, 1.0], &[0.0, 0.0]])).unwrap_err();
        assert_eq!(err, VecError::ZeroRow(1));
        assert_eq!(normalize_rows(&m(2, &[&[0.0, 0.0]])).unwrap_err(), VecError::ZeroRow(0));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.6, 0.8]).unwrap(), 0.6);
        assert!(matches!(
            cosine_sim(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(VecError::DimMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn sim_matrix_examples() {
        let s = sim_matrix(&m(2, &[&[1.0, 0.0]]), &m(2, &[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0]);
        let s = sim_matrix(&m(2, &[&[0.0, 1.0]]), &m(2, &[&[0.0, 1.0]])).unwrap();
        assert_eq!(s.row(0), &[1.0]);
        let s = sim_matrix(&m(2, &[&[0.6, 0.8]]), &m(2, &[&[1.0, 0.0], &[0.6, 0.8]])).unwrap();
        assert!((s.get(0, 0) - 0.6).abs() < 1e-7);
        assert!((s.get(0, 1) - 1.0).abs() < 1e-6);
        assert!(sim_matrix(&m(2, &[&[1.0, 0.0]]), &m(3, &[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[3.0, 1.0, 2.0], 2, Direction::Highest), vec![0, 2]);
        assert!(topk_indices(&[3.0, 1.0, 2.0], 0, Direction::Highest).is_empty());
        assert_eq!(topk_indices(&[1.0, 1.0, 0.0], 1, Direction::Highest), vec![0]);
        assert_eq!(topk_indices(&[3.0, 1.0, 2.0], 10, Direction::Lowest), vec![1, 2, 0]);
        assert_eq!(topk_indices(&[0.0, -0.0, 0.0], 2, Direction::Lowest), vec![0, 1]);
    }

    #[test]
    fn percentile_examples() {
        let s: Vec<f32> = (1..=10).map(|i| i as f32 / 10.0).collect();
        assert_eq!(percentile_low(&s, 5.0).unwrap(), 0.1);
        assert_eq!(percentile_low(&[0.7], 5.0).unwrap(), 0.7);
        assert_eq!(percentile_low(&[0.3, 0.1, 0.2], 100.0).unwrap(), 0.3);
        assert_eq!(percentile_low(&[], 5.0).unwrap_err(), VecError::EmptyInput);
        assert!(matches!(percentile_low(&[1.0], 0.0), Err(VecError::InvalidPercentile(_))));
        assert!(matches!(percentile_low(&[1.0], 100.5), Err(VecError::InvalidPercentile(_))));
    }

    #[test]
    fn ragged_buffers_rejected() {
        assert!(matches!(
            EmbeddingMatrix::new(3, vec![0.0; 4]),
            Err(VecError::RaggedBuffer { len: 4, dim: 3 })
        ));
        assert_eq!(EmbeddingMatrix::new(0, vec![]).unwrap_err(), VecError::ZeroDim);
    }

    #[test]
    fn score_vector_rejects_nan() {
        assert_eq!(ScoreVector::new(vec![0.1, f32::NAN]).unwrap_err(), VecError::NonFinite(1));
        assert_eq!(ScoreVector::new(vec![0.1, 0.2]).unwrap().len(), 2);
    }

    #[test]
    fn dot_tail_and_blocks_agree_with_naive_on_integers() {
        let a: Vec<f32> = (0..19).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..19).map(|i| (i % 3) as f32).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(dot(&a, &b), naive);
    }
}
