//! Correspondence quality metrics and the executable consistency theorem
//! check.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::PointMap;
use crate::error::{Error, Result};
use crate::geodesic::{geodesic_distances, geodesic_matrix};
use crate::mesh::TriangleMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    SqrtArea,
    Diameter,
}

/// Per-vertex geodesic errors scaled x100. Vertices whose targets are
/// unreachable on the evaluation mesh are excluded from the mean and
/// listed in `excluded`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean_geo_x100: f64,
    pub per_vertex: Vec<f64>,
    pub excluded: Vec<usize>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub proportions: Vec<f64>,
    pub auc: f64,
}

fn hard_indices(map: &PointMap, what: &str) -> Result<Vec<usize>> {
    map.hard_indices()
        .map(|s| s.to_vec())
        .ok_or_else(|| Error::Config(format!("{what} map must be hard")))
}

fn scale_factor(mesh: &TriangleMesh, normalization: Normalization) -> Result<f64> {
    let s = match normalization {
        Normalization::SqrtArea => mesh.surface_area().sqrt(),
        Normalization::Diameter => {
            let fields = geodesic_matrix(mesh);
            if let Some(bad) = fields.iter().find(|f| !f.is_complete()) {
                return Err(Error::DisconnectedMesh {
                    vertex: bad.source,
                    unreachable: bad.unreachable.len(),
                });
            }
            fields
                .iter()
                .flat_map(|f| f.distances.iter())
                .cloned()
                .fold(0.0, f64::max)
        }
    };
    if !(s > 0.0) {
        return Err(Error::DegenerateMesh("zero normalization scale".into()));
    }
    Ok(s)
}

/// Mean geodesic error x100 between predicted and reference targets,
/// measured on the target mesh and normalized by shape scale.
pub fn geodesic_error(
    pred: &PointMap,
    gt: &PointMap,
    target_mesh: &TriangleMesh,
    normalization: Normalization,
) -> Result<ErrorSummary> {
    let pred_idx = hard_indices(pred, "predicted")?;
    let gt_idx = hard_indices(gt, "reference")?;
    if pred_idx.len() != gt_idx.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted vs {} reference rows",
            pred_idx.len(),
            gt_idx.len()
        )));
    }
    let n_t = target_mesh.n_vertices();
    if let Some(&bad) = pred_idx.iter().chain(gt_idx.iter()).find(|&&i| i >= n_t) {
        return Err(Error::IndexOutOfRange { index: bad, n: n_t });
    }
    let scale = scale_factor(target_mesh, normalization)?;
    // one Dijkstra per distinct reference target
    let mut sources: Vec<usize> = gt_idx.clone();
    sources.sort_unstable();
    sources.dedup();
    let fields: Vec<_> = sources
        .par_iter()
        .map(|&s| (s, geodesic_distances(target_mesh, s)))
        .collect();
    let by_source: BTreeMap<usize, _> = fields.into_iter().collect();
    let mut per_vertex = Vec::with_capacity(pred_idx.len());
    let mut excluded = Vec::new();
    for (v, (&p, &g)) in pred_idx.iter().zip(&gt_idx).enumerate() {
        let d = by_source[&g].distances[p];
        if d.is_finite() {
            per_vertex.push(100.0 * d / scale);
        } else {
            excluded.push(v);
        }
    }
    if per_vertex.is_empty() {
        return Err(Error::DisconnectedMesh { vertex: gt_idx[0], unreachable: excluded.len() });
    }
    let mean = per_vertex.iter().sum::<f64>() / per_vertex.len() as f64;
    Ok(ErrorSummary { mean_geo_x100: mean, per_vertex, excluded, normalization })
}

/// Proportion-correct curve at `samples` uniform thresholds in
/// [0, max_threshold], with trapezoid area normalized to [0, 1].
pub fn pck_auc(errors: &ErrorSummary, max_threshold: f64, samples: usize) -> Result<PckCurve> {
    if !(max_threshold > 0.0) {
        return Err(Error::Config("max_threshold must be > 0".into()));
    }
    if samples < 2 {
        return Err(Error::Config("need >= 2 threshold samples".into()));
    }
    let n = errors.per_vertex.len() as f64;
    let thresholds: Vec<f64> = (0..samples)
        .map(|s| max_threshold * s as f64 / (samples - 1) as f64)
        .collect();
    let proportions: Vec<f64> = thresholds
        .iter()
        .map(|&t| errors.per_vertex.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect();
    let mut auc = 0.0;
    for s in 1..samples {
        auc += 0.5 * (proportions[s] + proportions[s - 1]) * (thresholds[s] - thresholds[s - 1]);
    }
    auc /= max_threshold;
    Ok(PckCurve { thresholds, proportions, auc })
}

/// Composes hard maps along each index cycle and reports the mean geodesic
/// deviation from the identity on the cycle's start mesh.
pub fn cycle_deviation(
    maps: &BTreeMap<(usize, usize), PointMap>,
    cycles: &[Vec<usize>],
    meshes: &[TriangleMesh],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cycles.len());
    for cycle in cycles {
        if cycle.len() < 2 {
            return Err(Error::Config("cycle needs >= 2 shapes".into()));
        }
        let start = cycle[0];
        let n0 = meshes[start].n_vertices();
        let mut composed: Vec<usize> = (0..n0).collect();
        for w in 0..cycle.len() {
            let i = cycle[w];
            let j = cycle[(w + 1) % cycle.len()];
            let step = maps.get(&(i, j)).ok_or(Error::MissingMap(i, j))?;
            let idx = hard_indices(step, "cycle")?;
            if idx.len() != meshes[i].n_vertices() {
                return Err(Error::ShapeMismatch(format!("map ({i}, {j}) row count")));
            }
            for t in composed.iter_mut() {
                *t = idx[*t];
            }
        }
        let pred = PointMap::hard(composed, n0, meshes[start].name(), meshes[start].name())?;
        let ident = PointMap::hard((0..n0).collect(), n0, meshes[start].name(), meshes[start].name())?;
        let summary = geodesic_error(&pred, &ident, &meshes[start], Normalization::SqrtArea)?;
        out.push(summary.mean_geo_x100);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub max_data_residual: f64,
    pub max_cycle_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Builds C_ij = A_j pinv(A_i) for every ordered pair and checks that
/// whenever the per-pair data residual is below tolerance, every 3-cycle
/// composition acts as the identity on the coefficient subspace.
pub fn verify_theorem1(coefficients: &[DMatrix<f64>], tolerance: f64) -> Result<Theorem1Report> {
    if coefficients.len() < 2 {
        return Err(Error::DimensionMismatch("need >= 2 coefficient matrices".into()));
    }
    let k = coefficients[0].nrows();
    let d = coefficients[0].ncols();
    if coefficients.iter().any(|a| a.nrows() != k || a.ncols() != d) {
        return Err(Error::DimensionMismatch("coefficient sizes differ".into()));
    }
    let pinvs: Vec<DMatrix<f64>> = coefficients
        .iter()
        .map(crate::fmap::pseudoinverse)
        .collect::<Result<Vec<_>>>()?;
    // full row rank check
    for a in coefficients {
        let svd = a.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if svd.singular_values.len() < k || smin <= 1e-12 * smax.max(1.0) {
            return Err(Error::RankDeficient { sigma_min: smin });
        }
    }
    let m = coefficients.len();
    let mut maps = vec![vec![DMatrix::zeros(0, 0); m]; m];
    let mut max_data = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let c_ij = &coefficients[j] * &pinvs[i];
            let resid = (&c_ij * &coefficients[i] - &coefficients[j]).norm();
            max_data = max_data.max(resid);
            maps[i][j] = c_ij;
        }
    }
    let mut max_cycle = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            for l in 0..m {
                if i == j || j == l || l == i {
                    continue;
                }
                let composed = &maps[l][i] * &maps[j][l] * &maps[i][j];
                let resid = (&composed * &coefficients[i] - &coefficients[i]).norm();
                max_cycle = max_cycle.max(resid);
            }
        }
    }
    let pass = max_data > tolerance || max_cycle <= tolerance;
    Ok(Theorem1Report {
        max_data_residual: max_data,
        max_cycle_residual: max_cycle,
        tolerance,
        pass,
    })
}
