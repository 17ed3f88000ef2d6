//! Collection-level shape graph and deterministic attention aggregation.
//!
//! Attention operates on mean-pooled per-shape descriptors; the resulting
//! context vector is broadcast and concatenated to every vertex feature.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::FeatureMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Top-k cosine similarity graph over the collection, with self-loops.
#[derive(Debug, Clone)]
pub struct ShapeGraph {
    pub node_descriptors: Vec<DVector<f64>>,
    /// Sorted neighbor lists, symmetric, each containing the node itself.
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
}

impl ShapeGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_descriptors.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(i, ns)| {
            ns.iter().all(|&j| self.neighbors[j].contains(&i))
        })
    }
}

/// Two-layer attention parameters. Layer 1 maps d -> h, layer 2 h -> h;
/// attention vectors act on concatenated transformed pairs (length 2h).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub leaky_slope: f64,
    pub layer_norm_gain: Vec<f64>,
    pub layer_norm_bias: Vec<f64>,
}

impl AttentionParams {
    pub fn d(&self) -> usize {
        self.w1.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn h(&self) -> usize {
        self.w1.len()
    }

    fn w1_mat(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.h(), self.d(), |r, c| self.w1[r][c])
    }

    fn w2_mat(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.h(), self.h(), |r, c| self.w2[r][c])
    }
}

/// Per-shape context vectors plus the per-vertex concatenation
/// G_i(v) = [context_i || F_i(v)].
#[derive(Debug, Clone)]
pub struct ContextFeatures {
    pub contexts: Vec<DVector<f64>>,
    pub per_vertex: Vec<DMatrix<f64>>,
    /// Attention coefficients per layer, row i = weights over neighbors(i).
    pub attention: [Vec<Vec<f64>>; 2],
}

fn mean_pool(f: &FeatureMatrix) -> DVector<f64> {
    let n = f.n() as f64;
    DVector::from_fn(f.d(), |j, _| f.values.column(j).sum() / n)
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Builds the union-symmetrized top-k cosine graph over mean-pooled shape
/// descriptors. Ties break toward the lower shape index.
pub fn build_shape_graph(features: &[FeatureMatrix], k: usize) -> Result<ShapeGraph> {
    if features.len() < 2 {
        return Err(Error::DimensionMismatch("need >= 2 shapes".into()));
    }
    if k < 1 {
        return Err(Error::Config("graph k must be >= 1".into()));
    }
    let d = features[0].d();
    if features.iter().any(|f| f.d() != d) {
        return Err(Error::DimensionMismatch("shapes disagree on feature dim".into()));
    }
    let descriptors: Vec<DVector<f64>> = features.iter().map(mean_pool).collect();
    let n = descriptors.len();
    let mut neighbors: Vec<std::collections::BTreeSet<usize>> =
        (0..n).map(|i| std::collections::BTreeSet::from([i])).collect();
    for i in 0..n {
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, cosine(&descriptors[i], &descriptors[j])))
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        for &(j, _) in sims.iter().take(k) {
            neighbors[i].insert(j);
            neighbors[j].insert(i);
        }
    }
    Ok(ShapeGraph {
        node_descriptors: descriptors,
        neighbors: neighbors.into_iter().map(|s| s.into_iter().collect()).collect(),
        k,
    })
}

/// Seeded uniform initialization in [-s, s] with s = sqrt(6 / (d + h));
/// layer-norm gain 1, bias 0.
pub fn init_attention_params(d: usize, h: usize, seed: u64) -> AttentionParams {
    assert!(d >= 1 && h >= 1);
    let s = (6.0 / (d + h) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(-s..s)).collect())
            .collect()
    };
    let w1 = mat(h, d);
    let w2 = mat(h, h);
    let a1 = (0..2 * h).map(|_| rng.gen_range(-s..s)).collect();
    let a2 = (0..2 * h).map(|_| rng.gen_range(-s..s)).collect();
    AttentionParams {
        w1,
        w2,
        a1,
        a2,
        leaky_slope: DEFAULT_LEAKY_SLOPE,
        layer_norm_gain: vec![1.0; h],
        layer_norm_bias: vec![0.0; h],
    }
}

fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Smooth exponential-linear nonlinearity.
fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn attention_layer(
    inputs: &[DVector<f64>],
    graph: &ShapeGraph,
    w: &DMatrix<f64>,
    a: &[f64],
    slope: f64,
) -> (Vec<DVector<f64>>, Vec<Vec<f64>>) {
    let transformed: Vec<DVector<f64>> = inputs.iter().map(|x| w * x).collect();
    let h = w.nrows();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut coefficients = Vec::with_capacity(inputs.len());
    for (i, ns) in graph.neighbors.iter().enumerate() {
        // e_ij = a . LeakyReLU([W x_i || W x_j]) with softmax over neighbors
        let scores: Vec<f64> = ns
            .iter()
            .map(|&j| {
                let mut e = 0.0;
                for t in 0..h {
                    e += a[t] * leaky_relu(transformed[i][t], slope);
                    e += a[h + t] * leaky_relu(transformed[j][t], slope);
                }
                e
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&e| (e - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let mut agg = DVector::zeros(h);
        for (slot, &j) in ns.iter().enumerate() {
            agg += &transformed[j] * alpha[slot];
        }
        outputs.push(agg.map(elu));
        coefficients.push(alpha);
    }
    (outputs, coefficients)
}

fn layer_norm(x: &DVector<f64>, gain: &[f64], bias: &[f64]) -> DVector<f64> {
    let h = x.len();
    let mean = x.sum() / h as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
    let denom = (var + 1e-6).sqrt();
    DVector::from_fn(h, |t, _| gain[t] * (x[t] - mean) / denom + bias[t])
}

/// Deterministic two-layer attention forward pass. The `_seed` argument is
/// retained for an optional stochastic (dropout) mode, which inference
/// never uses.
pub fn gat_forward(
    graph: &ShapeGraph,
    params: &AttentionParams,
    features: &[FeatureMatrix],
    _seed: u64,
) -> Result<ContextFeatures> {
    if features.len() != graph.n_nodes() {
        return Err(Error::ShapeMismatch("graph vs feature count".into()));
    }
    let d = params.d();
    if graph.node_descriptors.iter().any(|x| x.len() != d) {
        return Err(Error::ShapeMismatch(format!(
            "params expect d = {d}, descriptors disagree"
        )));
    }
    let w1 = params.w1_mat();
    let w2 = params.w2_mat();
    let (hidden, att1) =
        attention_layer(&graph.node_descriptors, graph, &w1, &params.a1, params.leaky_slope);
    let (raw_ctx, att2) = attention_layer(&hidden, graph, &w2, &params.a2, params.leaky_slope);
    let contexts: Vec<DVector<f64>> = raw_ctx
        .iter()
        .map(|x| layer_norm(x, &params.layer_norm_gain, &params.layer_norm_bias))
        .collect();
    let per_vertex = features
        .iter()
        .zip(&contexts)
        .map(|(f, ctx)| {
            let h = ctx.len();
            DMatrix::from_fn(f.n(), h + f.d(), |v, j| {
                if j < h {
                    ctx[j]
                } else {
                    f.values[(v, j - h)]
                }
            })
        })
        .collect();
    Ok(ContextFeatures { contexts, per_vertex, attention: [att1, att2] })
}
