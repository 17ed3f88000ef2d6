//! Graph geodesics: Dijkstra over the edge graph with Euclidean lengths.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::mesh::TriangleMesh;

/// Per-source-vertex geodesic distances. Unreachable vertices are flagged
/// rather than fatal; `DisconnectedMesh` is the caller's call to make.
#[derive(Debug, Clone)]
pub struct GeodesicField {
    pub source: usize,
    pub distances: Vec<f64>,
    pub unreachable: Vec<usize>,
}

impl GeodesicField {
    pub fn is_complete(&self) -> bool {
        self.unreachable.is_empty()
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties by vertex index for determinism
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn adjacency(mesh: &TriangleMesh) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); mesh.n_vertices()];
    for (a, b, len) in mesh.edges() {
        adj[a].push((b, len));
        adj[b].push((a, len));
    }
    adj
}

/// Dijkstra distances from `source` in model units.
pub fn geodesic_distances(mesh: &TriangleMesh, source: usize) -> GeodesicField {
    assert!(source < mesh.n_vertices(), "source out of range");
    geodesic_distances_adj(&adjacency(mesh), source)
}

fn geodesic_distances_adj(adj: &[Vec<(usize, f64)>], source: usize) -> GeodesicField {
    let n = adj.len();
    let mut dist = vec![f64::INFINITY; n];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry { dist: 0.0, vertex: source });
    while let Some(HeapEntry { dist: d, vertex: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, len) in &adj[u] {
            let cand = d + len;
            if cand < dist[v] {
                dist[v] = cand;
                heap.push(HeapEntry { dist: cand, vertex: v });
            }
        }
    }
    let unreachable = dist
        .iter()
        .enumerate()
        .filter(|(_, d)| !d.is_finite())
        .map(|(i, _)| i)
        .collect();
    GeodesicField { source, distances: dist, unreachable }
}

/// All-pairs geodesics, one Dijkstra per source, parallel over sources.
pub fn geodesic_matrix(mesh: &TriangleMesh) -> Vec<GeodesicField> {
    use rayon::prelude::*;
    let adj = adjacency(mesh);
    (0..mesh.n_vertices())
        .into_par_iter()
        .map(|s| geodesic_distances_adj(&adj, s))
        .collect()
}
