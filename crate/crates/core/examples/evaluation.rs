//! Scores a correspondence against ground truth: per-vertex geodesic error
//! (scaled by the square root of the surface area and reported x100) and the
//! proportion-correct curve with its normalized area.

use shapecorr::eval::{geodesic_error, pck_auc, Normalization};
use shapecorr::synthetic;
use shapecorr::PointMap;

fn main() -> shapecorr::Result<()> {
    let mesh = synthetic::icosphere(2);
    let n = mesh.n_vertices();
    let gt = PointMap::hard((0..n).collect(), n, "a", "b")?;

    // corrupt 10% of an otherwise perfect map
    let mut indices: Vec<usize> = (0..n).collect();
    for v in (0..n).step_by(10) {
        indices[v] = (v + n / 2) % n;
    }
    let pred = PointMap::hard(indices, n, "a", "b")?;

    let summary = geodesic_error(&pred, &gt, &mesh, Normalization::SqrtArea)?;
    println!("mean geodesic error x100: {:.4}", summary.mean_geo_x100);
    let wrong = summary.per_vertex.iter().filter(|&&e| e > 0.0).count();
    println!("vertices with nonzero error: {wrong}/{n}");

    let curve = pck_auc(&summary, 25.0, 101)?;
    println!("proportion correct at threshold:");
    for s in (0..101).step_by(25) {
        println!("  {:>6.2} -> {:.3}", curve.thresholds[s], curve.proportions[s]);
    }
    println!("normalized area under the curve: {:.4}", curve.auc);
    Ok(())
}
