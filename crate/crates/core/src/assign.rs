//! Spatial correspondence machinery: soft point maps, Sinkhorn-normalized
//! universe assignments, hardening, and cycle-consistent composition.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hungarian::max_weight_assignment;

/// Row count above which hardening switches from exact Hungarian to greedy.
pub const HUNGARIAN_LIMIT: usize = 512;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_SINKHORN_ITERS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone)]
enum MapWeights {
    Soft(DMatrix<f64>),
    /// One target index per source vertex.
    Hard(Vec<usize>),
}

/// Point-wise correspondence from `source` to `target` vertices.
#[derive(Debug, Clone)]
pub struct PointMap {
    weights: MapWeights,
    n_target: usize,
    pub source: String,
    pub target: String,
    /// Rows re-assigned by the nearest-claimed-point fallback during
    /// hard universe composition. Empty for directly constructed maps.
    pub fallback_rows: Vec<usize>,
}

impl PointMap {
    /// Row-stochastic soft map. Rows of direct maps sum to 1; composed
    /// universe maps may be substochastic, so rows <= 1 + tol is accepted.
    pub fn soft(weights: DMatrix<f64>, source: &str, target: &str) -> Result<Self> {
        if weights.iter().any(|&v| !v.is_finite() || v < -1e-12) {
            return Err(Error::NonFinite("soft point map weights".into()));
        }
        for r in 0..weights.nrows() {
            let s: f64 = weights.row(r).iter().sum();
            if s > 1.0 + 1e-6 {
                return Err(Error::ShapeMismatch(format!(
                    "soft map row {r} sums to {s}, expected <= 1"
                )));
            }
        }
        let n_target = weights.ncols();
        Ok(Self {
            weights: MapWeights::Soft(weights),
            n_target,
            source: source.into(),
            target: target.into(),
            fallback_rows: Vec::new(),
        })
    }

    /// Hard map as one 0-based target index per source vertex.
    pub fn hard(indices: Vec<usize>, n_target: usize, source: &str, target: &str) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_target) {
            return Err(Error::IndexOutOfRange { index: bad, n: n_target });
        }
        Ok(Self {
            weights: MapWeights::Hard(indices),
            n_target,
            source: source.into(),
            target: target.into(),
            fallback_rows: Vec::new(),
        })
    }

    pub fn mode(&self) -> MapMode {
        match self.weights {
            MapWeights::Soft(_) => MapMode::Soft,
            MapWeights::Hard(_) => MapMode::Hard,
        }
    }

    pub fn n_source(&self) -> usize {
        match &self.weights {
            MapWeights::Soft(w) => w.nrows(),
            MapWeights::Hard(idx) => idx.len(),
        }
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    pub fn hard_indices(&self) -> Option<&[usize]> {
        match &self.weights {
            MapWeights::Hard(idx) => Some(idx),
            MapWeights::Soft(_) => None,
        }
    }

    pub fn soft_weights(&self) -> Option<&DMatrix<f64>> {
        match &self.weights {
            MapWeights::Soft(w) => Some(w),
            MapWeights::Hard(_) => None,
        }
    }

    /// Pi * X: pulls per-target-vertex rows back to source vertices.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n_target, "point map application");
        match &self.weights {
            MapWeights::Soft(w) => w * x,
            MapWeights::Hard(idx) => {
                let mut out = DMatrix::zeros(idx.len(), x.ncols());
                for (r, &t) in idx.iter().enumerate() {
                    out.row_mut(r).copy_from(&x.row(t));
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.weights {
            MapWeights::Soft(w) => w.clone(),
            MapWeights::Hard(idx) => {
                let mut m = DMatrix::zeros(idx.len(), self.n_target);
                for (r, &t) in idx.iter().enumerate() {
                    m[(r, t)] = 1.0;
                }
                m
            }
        }
    }

    /// True if a hard map is injective (the partial-permutation column
    /// constraint); soft maps report false.
    pub fn is_partial_permutation(&self) -> bool {
        match &self.weights {
            MapWeights::Hard(idx) => {
                let mut seen = vec![false; self.n_target];
                idx.iter().all(|&t| !std::mem::replace(&mut seen[t], true))
            }
            MapWeights::Soft(_) => false,
        }
    }
}

/// Shape-to-universe assignment: soft scores plus hardened indices.
#[derive(Debug, Clone)]
pub struct UniverseAssignment {
    pub soft: DMatrix<f64>,
    /// hard[v] = universe point claimed by vertex v
    pub hard: Vec<usize>,
    pub c: usize,
    pub shape: String,
}

impl UniverseAssignment {
    pub fn from_scores(
        scores: &DMatrix<f64>,
        iterations: usize,
        temperature: f64,
        shape: &str,
    ) -> Result<Self> {
        let soft = sinkhorn(scores, iterations, temperature)?;
        let hard = harden(&soft)?;
        Ok(Self { soft, hard, c: scores.ncols(), shape: shape.into() })
    }

    pub fn n(&self) -> usize {
        self.soft.nrows()
    }

    /// Partial-permutation check on the hardened assignment: every vertex
    /// claims a distinct universe point.
    pub fn hard_is_valid(&self) -> bool {
        let mut seen = vec![false; self.c];
        self.hard.iter().all(|&u| u < self.c && !std::mem::replace(&mut seen[u], true))
    }
}

/// Soft point map Pi_ij = row-softmax(F_i F_j^T / tau), stabilized by
/// row-max subtraction.
pub fn soft_pointmap(
    f_i: &DMatrix<f64>,
    f_j: &DMatrix<f64>,
    tau: f64,
    source: &str,
    target: &str,
) -> Result<PointMap> {
    if f_i.ncols() != f_j.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {} vs {}",
            f_i.ncols(),
            f_j.ncols()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    let scores = f_i * f_j.transpose() / tau;
    let mut weights = DMatrix::zeros(scores.nrows(), scores.ncols());
    for r in 0..scores.nrows() {
        let max = scores.row(r).max();
        let mut sum = 0.0;
        for c in 0..scores.ncols() {
            let e = (scores[(r, c)] - max).exp();
            weights[(r, c)] = e;
            sum += e;
        }
        for c in 0..scores.ncols() {
            weights[(r, c)] /= sum;
        }
    }
    PointMap::soft(weights, source, target)
}

/// Sinkhorn normalization of raw scores toward the partial-assignment
/// polytope (rows sum 1, column sums <= 1). A slack column absorbs
/// unmatched universe capacity during the iterations and is dropped on
/// return, after which rows are renormalized.
pub fn sinkhorn(scores: &DMatrix<f64>, iterations: usize, temperature: f64) -> Result<DMatrix<f64>> {
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("sinkhorn scores".into()));
    }
    if iterations < 1 {
        return Err(Error::Config("sinkhorn needs iterations >= 1".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("sinkhorn temperature must be > 0".into()));
    }
    let n = scores.nrows();
    let c = scores.ncols();
    // log-domain stabilization: exp((s - rowmax)/T); slack carries score 0
    let mut k = DMatrix::zeros(n, c + 1);
    for r in 0..n {
        let max = scores.row(r).max().max(0.0);
        for j in 0..c {
            k[(r, j)] = ((scores[(r, j)] - max) / temperature).exp();
        }
        k[(r, c)] = (-max / temperature).exp();
    }
    normalize_with_slack(&mut k, iterations);
    // drop slack, renormalize rows, then polish the column constraint
    let mut out = k.columns(0, c).clone_owned();
    finish_normalization(&mut out, 200_000);
    Ok(out)
}

/// The normalization loop alone, for already-nonnegative matrices. Feasible
/// inputs (rows = 1, columns <= 1) pass through unchanged.
pub fn sinkhorn_normalize(matrix: &DMatrix<f64>, iterations: usize) -> Result<DMatrix<f64>> {
    if matrix.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::NonFinite("sinkhorn matrix".into()));
    }
    let n = matrix.nrows();
    let c = matrix.ncols();
    let mut k = DMatrix::zeros(n, c + 1);
    for r in 0..n {
        let row_sum: f64 = matrix.row(r).iter().sum();
        for j in 0..c {
            k[(r, j)] = matrix[(r, j)];
        }
        // slack only carries what the row is missing; feasible rows get none
        k[(r, c)] = (1.0 - row_sum).max(0.0);
    }
    normalize_with_slack(&mut k, iterations);
    let mut out = k.columns(0, c).clone_owned();
    finish_normalization(&mut out, 200_000);
    Ok(out)
}

fn normalize_with_slack(k: &mut DMatrix<f64>, iterations: usize) {
    let n = k.nrows();
    let c = k.ncols() - 1;
    for _ in 0..iterations {
        for r in 0..n {
            let s: f64 = k.row(r).iter().sum();
            if s > 0.0 {
                for j in 0..=c {
                    k[(r, j)] /= s;
                }
            }
        }
        for j in 0..c {
            let s: f64 = k.column(j).iter().sum();
            if s > 1.0 {
                for r in 0..n {
                    k[(r, j)] /= s;
                }
            }
        }
    }
}

/// Alternate row normalization and column scaling on the slackless matrix
/// until the column violation is negligible, ending on a row step.
fn finish_normalization(out: &mut DMatrix<f64>, max_extra: usize) {
    let n = out.nrows();
    let c = out.ncols();
    for _ in 0..max_extra {
        for j in 0..c {
            let s: f64 = out.column(j).iter().sum();
            if s > 1.0 {
                for r in 0..n {
                    out[(r, j)] /= s;
                }
            }
        }
        for r in 0..n {
            let s: f64 = out.row(r).iter().sum();
            if s > 0.0 {
                for j in 0..c {
                    out[(r, j)] /= s;
                }
            }
        }
        let violation = (0..c)
            .map(|j| out.column(j).iter().sum::<f64>() - 1.0)
            .fold(0.0f64, f64::max);
        if violation <= 1e-6 {
            break;
        }
    }
}

/// Hard partial permutation from a soft assignment: exact Hungarian up to
/// `HUNGARIAN_LIMIT` rows, greedy descending-weight above. Deterministic
/// tie-break by (row, col).
pub fn harden(soft: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = soft.nrows();
    let c = soft.ncols();
    if c < n {
        return Err(Error::InfeasibleAssignment { rows: n, cols: c });
    }
    if n <= HUNGARIAN_LIMIT {
        Ok(max_weight_assignment(soft))
    } else {
        Ok(greedy_assignment(soft))
    }
}

fn greedy_assignment(soft: &DMatrix<f64>) -> Vec<usize> {
    let n = soft.nrows();
    let c = soft.ncols();
    let mut entries: Vec<(f64, usize, usize)> = Vec::with_capacity(n * c);
    for r in 0..n {
        for j in 0..c {
            entries.push((soft[(r, j)], r, j));
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    let mut row_taken = vec![false; n];
    let mut col_taken = vec![false; c];
    let mut assignment = vec![usize::MAX; n];
    let mut remaining = n;
    for (_, r, j) in entries {
        if !row_taken[r] && !col_taken[j] {
            row_taken[r] = true;
            col_taken[j] = true;
            assignment[r] = j;
            remaining -= 1;
            if remaining == 0 {
                break;
            }
        }
    }
    assignment
}

/// Pairwise map from two universe assignments: weights = Pi_i Pi_j^T.
/// In hard mode, source rows whose universe point is unclaimed by shape j
/// are re-assigned to the nearest claimed universe point by soft score and
/// flagged in `fallback_rows`.
pub fn compose_universe(
    pi_i: &UniverseAssignment,
    pi_j: &UniverseAssignment,
    mode: MapMode,
) -> Result<PointMap> {
    if pi_i.c != pi_j.c {
        return Err(Error::UniverseSizeMismatch(pi_i.c, pi_j.c));
    }
    match mode {
        MapMode::Soft => {
            let weights = &pi_i.soft * pi_j.soft.transpose();
            PointMap::soft(weights, &pi_i.shape, &pi_j.shape)
        }
        MapMode::Hard => {
            // invert shape j's claim: universe point -> vertex of j
            let mut claimed = vec![usize::MAX; pi_i.c];
            for (v, &u) in pi_j.hard.iter().enumerate() {
                claimed[u] = v;
            }
            let mut indices = Vec::with_capacity(pi_i.n());
            let mut fallback_rows = Vec::new();
            for (r, &u) in pi_i.hard.iter().enumerate() {
                if claimed[u] != usize::MAX {
                    indices.push(claimed[u]);
                } else {
                    // nearest claimed universe point under this row's soft score
                    let mut best = (f64::NEG_INFINITY, usize::MAX);
                    for (up, &v) in claimed.iter().enumerate() {
                        if v != usize::MAX {
                            let s = pi_i.soft[(r, up)];
                            if s > best.0 {
                                best = (s, v);
                            }
                        }
                    }
                    indices.push(best.1);
                    fallback_rows.push(r);
                }
            }
            let mut map = PointMap::hard(indices, pi_j.n(), &pi_i.shape, &pi_j.shape)?;
            map.fallback_rows = fallback_rows;
            Ok(map)
        }
    }
}

/// Universe size policy: the reference shape's vertex count when given,
/// otherwise the maximum vertex count across the collection.
pub fn select_universe_size(sizes: &[usize], reference: Option<usize>) -> usize {
    assert!(!sizes.is_empty(), "empty collection");
    match reference {
        Some(idx) => sizes[idx],
        None => *sizes.iter().max().unwrap(),
    }
}
