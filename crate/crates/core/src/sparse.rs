//! Minimal sparse symmetric operator built from coalesced triplets.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sparse matrix stored as sorted, coalesced (row, col, value) triplets.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    rows: usize,
    cols: usize,
    triplets: Vec<(usize, usize, f64)>,
    symmetric: bool,
}

impl SparseOperator {
    /// Build from raw triplets; duplicates are summed, exact zeros kept out.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
        symmetric: bool,
    ) -> Result<Self> {
        for &(r, c, v) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::IndexOutOfRange {
                    index: r.max(c),
                    n: rows.max(cols),
                });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("sparse triplet".into()));
            }
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut coalesced: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            match coalesced.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => coalesced.push((r, c, v)),
            }
        }
        coalesced.retain(|&(_, _, v)| v != 0.0);
        Ok(Self {
            rows,
            cols,
            triplets: coalesced,
            symmetric,
        })
    }

    /// Diagonal matrix from its entries.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        let triplets = diag
            .iter()
            .enumerate()
            .map(|(i, &v)| (i, i, v))
            .collect();
        Self::from_triplets(diag.len(), diag.len(), triplets, true).unwrap()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn triplets(&self) -> &[(usize, usize, f64)] {
        &self.triplets
    }

    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    /// True if the operator is stored with diagonal entries only.
    pub fn is_diagonal(&self) -> bool {
        self.triplets.iter().all(|&(r, c, _)| r == c)
    }

    pub fn diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.rows.min(self.cols));
        for &(r, c, v) in &self.triplets {
            if r == c {
                d[r] = v;
            }
        }
        d
    }

    pub fn sum(&self) -> f64 {
        self.triplets.iter().map(|t| t.2).sum()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        let mut y = DVector::zeros(self.rows);
        for &(r, c, v) in &self.triplets {
            y[r] += v * x[c];
        }
        y
    }

    /// Dense n x k product, used when projecting feature matrices.
    pub fn mul_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.cols, "matmat dimension");
        let mut y = DMatrix::zeros(self.rows, x.ncols());
        for &(r, c, v) in &self.triplets {
            for j in 0..x.ncols() {
                y[(r, j)] += v * x[(c, j)];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] += v;
        }
        m
    }

    /// Checks the stored symmetry flag against the triplets.
    pub fn symmetry_residual(&self) -> f64 {
        use std::collections::HashMap;
        let mut map: HashMap<(usize, usize), f64> = HashMap::new();
        for &(r, c, v) in &self.triplets {
            map.insert((r, c), v);
        }
        let mut worst: f64 = 0.0;
        for (&(r, c), &v) in &map {
            let w = map.get(&(c, r)).copied().unwrap_or(0.0);
            worst = worst.max((v - w).abs());
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coalesces_duplicates() {
        let op = SparseOperator::from_triplets(
            2,
            2,
            vec![(0, 0, 1.0), (0, 0, 2.0), (1, 0, -1.0), (0, 1, -1.0)],
            true,
        )
        .unwrap();
        assert_eq!(op.nnz(), 3);
        assert_eq!(op.to_dense()[(0, 0)], 3.0);
        assert!(op.symmetry_residual() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range() {
        let err = SparseOperator::from_triplets(2, 2, vec![(2, 0, 1.0)], false);
        assert!(matches!(err, Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn matvec_matches_dense() {
        let op =
            SparseOperator::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)], false)
                .unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y = op.mul_vec(&x);
        assert_eq!(y, op.to_dense() * x);
    }
}
