//! End-to-end orchestration: per-shape precomputation (with caching),
//! pairwise matching, and collection matching through the shared universe.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::assign::{compose_universe, MapMode, PointMap, UniverseAssignment};
use crate::basis::{compute_hybrid_basis, HybridBasis, ReducedMass};
use crate::cache::{content_key, Cache};
use crate::config::{PipelineConfig, UniversePolicy};
use crate::descriptor::{wks_descriptors, xyz_descriptors, FeatureMatrix};
use crate::error::{Error, Result};
use crate::fmap::{solve_hybrid_map, FunctionalMap, ShapeSpectral};
use crate::graph::{build_shape_graph, gat_forward, init_attention_params, ShapeGraph};
use crate::loss::{CollectionState, ShapeEntry};
use crate::mesh::TriangleMesh;

/// Everything downstream stages need about one shape.
#[derive(Debug, Clone)]
pub struct ShapeData {
    pub mesh: TriangleMesh,
    pub basis: HybridBasis,
    pub features: FeatureMatrix,
    /// Stacked spectral coefficients of the features, (k_LB + k_Elas) x d.
    pub coefficients: DMatrix<f64>,
}

impl ShapeData {
    pub fn name(&self) -> &str {
        self.mesh.name()
    }

    pub fn spectral(&self) -> ShapeSpectral<'_> {
        ShapeSpectral { name: self.mesh.name(), basis: &self.basis, features: &self.features.values }
    }
}

/// Deterministic byte digest of mesh geometry for cache keys.
fn mesh_bytes(mesh: &TriangleMesh) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(mesh.n_vertices() * 24 + mesh.n_faces() * 24);
    for v in mesh.vertices() {
        for c in v {
            bytes.extend_from_slice(&c.to_bits().to_le_bytes());
        }
    }
    for f in mesh.faces() {
        for &i in f {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
        }
    }
    bytes
}

/// Truncated spectrum sizes actually computable on this mesh.
pub fn effective_k(config: &PipelineConfig, n: usize) -> (usize, usize) {
    (config.k_lb.min(n - 1), config.k_elas.min(n - 1))
}

/// Computes (or loads) the hybrid basis and descriptors of one mesh.
/// Features are WKS when the smoothness spectrum allows it (k >= 8) and
/// raw coordinates otherwise, so tiny meshes stay matchable.
pub fn prepare_shape(
    mesh: TriangleMesh,
    config: &PipelineConfig,
    cache: Option<&Cache>,
) -> Result<ShapeData> {
    config.validate()?;
    let n = mesh.n_vertices();
    let (k_lb, k_elas) = effective_k(config, n);
    let geometry = mesh_bytes(&mesh);
    let basis_tag = format!("{k_lb}:{k_elas}:{}", config.bending_weight);
    let basis = match cache {
        Some(cache) => {
            let key = content_key([("mesh", geometry.as_slice()), ("basis", basis_tag.as_bytes())]);
            let fresh = std::cell::OnceCell::new();
            let compute = |part: usize| -> Result<DMatrix<f64>> {
                let b = match fresh.get() {
                    Some(b) => b,
                    None => {
                        let computed =
                            compute_hybrid_basis(&mesh, k_lb, k_elas, config.bending_weight)?;
                        fresh.set(computed).ok();
                        fresh.get().unwrap()
                    }
                };
                Ok(match part {
                    0 => b.lb.functions.clone(),
                    1 => DMatrix::from_fn(1, b.lb.k(), |_, q| b.lb.eigenvalues[q]),
                    2 => b.elastic.functions.clone(),
                    _ => DMatrix::from_fn(1, b.elastic.k(), |_, q| b.elastic.eigenvalues[q]),
                })
            };
            let lb_fun = cache.matrix("lb-basis", &key, || compute(0))?;
            let lb_val = cache.matrix("lb-spectrum", &key, || compute(1))?;
            let el_fun = cache.matrix("elastic-basis", &key, || compute(2))?;
            let el_val = cache.matrix("elastic-spectrum", &key, || compute(3))?;
            let mass = crate::mesh::mass_matrix(&mesh, true)?;
            HybridBasis {
                lb: crate::basis::SpectralBasis {
                    functions: lb_fun,
                    eigenvalues: lb_val.iter().cloned().collect(),
                    mass: mass.clone(),
                    kind: crate::basis::BasisKind::LB,
                },
                elastic: crate::basis::SpectralBasis {
                    functions: el_fun,
                    eigenvalues: el_val.iter().cloned().collect(),
                    mass,
                    kind: crate::basis::BasisKind::Elastic,
                },
            }
        }
        None => compute_hybrid_basis(&mesh, k_lb, k_elas, config.bending_weight)?,
    };
    let feature_tag = format!("{}:{}:{basis_tag}", config.wks_dim, config.wks_sigma_scale);
    let compute_features = || -> Result<DMatrix<f64>> {
        if basis.lb.k() >= 8 {
            Ok(wks_descriptors(&basis.lb, config.wks_dim, config.wks_sigma_scale)?.values)
        } else {
            Ok(xyz_descriptors(&mesh)?.values)
        }
    };
    let values = match cache {
        Some(cache) => {
            let key =
                content_key([("mesh", geometry.as_slice()), ("features", feature_tag.as_bytes())]);
            cache.matrix("features", &key, compute_features)?
        }
        None => compute_features()?,
    };
    let provenance = if basis.lb.k() >= 8 {
        crate::descriptor::FeatureProvenance::Wks
    } else {
        crate::descriptor::FeatureProvenance::Xyz
    };
    let features = FeatureMatrix::new(values, provenance)?;
    let coefficients = basis.project(&features.values)?;
    Ok(ShapeData { mesh, basis, features, coefficients })
}

/// Both functional maps of a pair and the hard vertex map a -> b.
#[derive(Debug)]
pub struct PairMatch {
    pub map_ab: FunctionalMap,
    pub map_ba: FunctionalMap,
    pub pointmap_ab: PointMap,
}

pub fn match_pair(a: &ShapeData, b: &ShapeData, config: &PipelineConfig) -> Result<PairMatch> {
    let map_ab = solve_hybrid_map(&a.spectral(), &b.spectral(), config.lambda_lb, config.lambda_elas)?;
    let map_ba = solve_hybrid_map(&b.spectral(), &a.spectral(), config.lambda_lb, config.lambda_elas)?;
    // rows of the conversion run over the map's target vertices, so the
    // b -> a map yields per-a-vertex targets on b
    let pointmap_ab = crate::fmap::pointmap_from_fmap(&map_ba, &b.basis, &a.basis)?;
    Ok(PairMatch { map_ab, map_ba, pointmap_ab })
}

/// Context-augmented per-vertex features for every shape, plus the graph.
pub fn context_features(
    shapes: &[ShapeData],
    config: &PipelineConfig,
) -> Result<(ShapeGraph, Vec<DMatrix<f64>>)> {
    let features: Vec<FeatureMatrix> = shapes.iter().map(|s| s.features.clone()).collect();
    let d = features[0].d();
    if features.iter().any(|f| f.d() != d) {
        return Err(Error::ShapeMismatch(
            "shapes mix descriptor kinds; use a uniform collection".into(),
        ));
    }
    let graph = build_shape_graph(&features, config.graph_k.min(shapes.len() - 1))?;
    let params = init_attention_params(d, config.attention_width, config.seed);
    let ctx = gat_forward(&graph, &params, &features, config.seed)?;
    Ok((graph, ctx.per_vertex))
}

/// Picks the reference shape and universe size for a collection.
pub fn universe_size(shapes: &[ShapeData], policy: &UniversePolicy) -> Result<(usize, usize)> {
    let mut reference = 0;
    for (i, s) in shapes.iter().enumerate() {
        if s.mesh.n_vertices() > shapes[reference].mesh.n_vertices() {
            reference = i;
        }
    }
    let c = match policy {
        UniversePolicy::Max => shapes[reference].mesh.n_vertices(),
        UniversePolicy::Ref(name) => {
            reference = shapes
                .iter()
                .position(|s| s.name() == name)
                .ok_or_else(|| Error::Config(format!("unknown reference shape '{name}'")))?;
            shapes[reference].mesh.n_vertices()
        }
        UniversePolicy::Fixed(n) => *n,
    };
    Ok((reference, c))
}

/// Raw shape-to-universe scores: similarity of context-augmented features
/// against the reference shape's, padded or truncated to `c` columns.
pub fn universe_scores(
    augmented: &[DMatrix<f64>],
    reference: usize,
    c: usize,
) -> Vec<DMatrix<f64>> {
    let anchor = &augmented[reference];
    augmented
        .iter()
        .map(|g| {
            let raw = g * anchor.transpose();
            let floor = raw.min() - 10.0;
            DMatrix::from_fn(g.nrows(), c, |v, u| {
                if u < raw.ncols() {
                    raw[(v, u)]
                } else {
                    floor
                }
            })
        })
        .collect()
}

#[derive(Debug)]
pub struct CollectionMatch {
    pub graph: ShapeGraph,
    pub assignments: Vec<UniverseAssignment>,
    /// Hard composed maps for every active ordered pair.
    pub pairwise: BTreeMap<(usize, usize), PointMap>,
    pub pairs: Vec<(usize, usize)>,
    pub reference: usize,
    pub c: usize,
}

/// Matches a whole collection through the universe: attention context,
/// Sinkhorn assignment per shape, then composed pairwise maps, which are
/// cycle consistent by construction.
pub fn match_collection(shapes: &[ShapeData], config: &PipelineConfig) -> Result<CollectionMatch> {
    if shapes.len() < 2 {
        return Err(Error::Config("collection needs >= 2 shapes".into()));
    }
    let (graph, augmented) = context_features(shapes, config)?;
    let (reference, c) = universe_size(shapes, &config.universe_size_policy)?;
    let scores = universe_scores(&augmented, reference, c);
    let assignments: Vec<UniverseAssignment> = shapes
        .iter()
        .zip(&scores)
        .map(|(s, sc)| {
            UniverseAssignment::from_scores(sc, config.sinkhorn_iters, config.tau, s.name())
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = config.pairs(shapes.len(), Some(&graph.neighbors));
    let mut pairwise = BTreeMap::new();
    for &(i, j) in &pairs {
        pairwise.insert((i, j), compose_universe(&assignments[i], &assignments[j], MapMode::Hard)?);
    }
    Ok(CollectionMatch { graph, assignments, pairwise, pairs, reference, c })
}

/// Assembles the optimizer/loss view of a collection: spectral entries,
/// solved functional maps for every active pair, and the raw universe
/// logits.
pub fn build_state(shapes: &[ShapeData], config: &PipelineConfig) -> Result<CollectionState> {
    if shapes.len() < 2 {
        return Err(Error::Config("collection needs >= 2 shapes".into()));
    }
    let (graph, augmented) = context_features(shapes, config)?;
    let (reference, c) = universe_size(shapes, &config.universe_size_policy)?;
    let logits = universe_scores(&augmented, reference, c);
    let entries: Vec<ShapeEntry> = shapes
        .iter()
        .map(|s| {
            ShapeEntry::new(
                s.name(),
                s.basis.concatenated(),
                s.basis.lb.k(),
                s.coefficients.clone(),
                ReducedMass::new(&s.basis.elastic)?.matrix,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = config.pairs(shapes.len(), Some(&graph.neighbors));
    let mut maps = BTreeMap::new();
    for &(i, j) in &pairs {
        maps.insert(
            (i, j),
            solve_hybrid_map(
                &shapes[i].spectral(),
                &shapes[j].spectral(),
                config.lambda_lb,
                config.lambda_elas,
            )?,
        );
        // structural terms need both orders even under a sparse pair policy
        if !pairs.contains(&(j, i)) && !maps.contains_key(&(j, i)) {
            maps.insert(
                (j, i),
                solve_hybrid_map(
                    &shapes[j].spectral(),
                    &shapes[i].spectral(),
                    config.lambda_lb,
                    config.lambda_elas,
                )?,
            );
        }
    }
    CollectionState::new(
        entries,
        pairs,
        maps,
        logits,
        config.tau,
        config.sinkhorn_iters,
        config.coupling_order,
    )
}
