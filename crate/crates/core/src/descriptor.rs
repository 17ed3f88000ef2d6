//! Per-vertex feature matrices: wave kernel signatures, raw coordinates,
//! or externally supplied features.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisKind, SpectralBasis};
use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;

pub const DEFAULT_WKS_DIM: usize = 128;
pub const DEFAULT_SIGMA_SCALE: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureProvenance {
    Wks,
    Xyz,
    External,
}

#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub provenance: FeatureProvenance,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, provenance: FeatureProvenance) -> Result<Self> {
        if values.ncols() < 1 {
            return Err(Error::ShapeMismatch("feature dimension must be >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self { values, provenance })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }
}

/// Wave kernel signature from an LB basis: `d` energy levels log-spaced over
/// [log lambda_2, log lambda_k], Gaussian bandwidth
/// sigma = sigma_scale * (log lambda_k - log lambda_2) / d, columns L2-normalized.
pub fn wks_descriptors(basis: &SpectralBasis, d: usize, sigma_scale: f64) -> Result<FeatureMatrix> {
    if basis.kind != BasisKind::LB {
        return Err(Error::InsufficientSpectrum("WKS needs an LB basis".into()));
    }
    let k = basis.k();
    if k < 8 {
        return Err(Error::InsufficientSpectrum(format!("WKS needs k >= 8, got {k}")));
    }
    // skip near-zero eigenvalues (the constant mode)
    let floor = basis.eigenvalues[k - 1].abs() * 1e-10 + 1e-12;
    let positive: Vec<(usize, f64)> = basis
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > floor)
        .map(|(q, &l)| (q, l))
        .collect();
    if positive.len() < 2 {
        return Err(Error::InsufficientSpectrum("spectrum has < 2 positive eigenvalues".into()));
    }
    let log_min = positive[0].1.ln();
    let log_max = positive[positive.len() - 1].1.ln();
    let span = (log_max - log_min).max(1e-12);
    let sigma = sigma_scale * span / d as f64;
    let n = basis.n();
    let mut values = DMatrix::zeros(n, d);
    for t in 0..d {
        let e = if d == 1 { log_min } else { log_min + span * t as f64 / (d - 1) as f64 };
        let mut weights = vec![0.0; positive.len()];
        let mut wsum = 0.0;
        for (slot, &(_, l)) in positive.iter().enumerate() {
            let w = (-((e - l.ln()).powi(2)) / (2.0 * sigma * sigma)).exp();
            weights[slot] = w;
            wsum += w;
        }
        for v in 0..n {
            let mut acc = 0.0;
            for (slot, &(q, _)) in positive.iter().enumerate() {
                let phi = basis.functions[(v, q)];
                acc += weights[slot] * phi * phi;
            }
            values[(v, t)] = acc / wsum;
        }
        // L2-normalize the energy column
        let norm = values.column(t).norm();
        if norm > 0.0 {
            for v in 0..n {
                values[(v, t)] /= norm;
            }
        }
    }
    FeatureMatrix::new(values, FeatureProvenance::Wks)
}

/// Raw vertex coordinates as features (d = 3).
pub fn xyz_descriptors(mesh: &TriangleMesh) -> Result<FeatureMatrix> {
    let values = DMatrix::from_fn(mesh.n_vertices(), 3, |i, j| mesh.vertices()[i][j]);
    FeatureMatrix::new(values, FeatureProvenance::Xyz)
}
