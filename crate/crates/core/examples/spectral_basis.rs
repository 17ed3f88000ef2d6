//! Computes the smoothness (Laplace-Beltrami) and deformation-sensitive
//! spectra of a synthetic shape and prints the leading eigenvalues of each
//! family side by side.

use shapecorr::basis::compute_hybrid_basis;
use shapecorr::synthetic;

fn main() -> shapecorr::Result<()> {
    let mesh = synthetic::bumpy_sphere(10, 9, 0.3);
    println!(
        "mesh: {} vertices, {} faces, area {:.4}",
        mesh.n_vertices(),
        mesh.n_faces(),
        mesh.surface_area()
    );

    let hybrid = compute_hybrid_basis(&mesh, 10, 6, 1.0)?;
    println!("{:>4} {:>14} {:>14}", "q", "smooth", "elastic");
    for q in 0..10 {
        let elas = hybrid
            .elastic
            .eigenvalues
            .get(q)
            .map(|v| format!("{v:>14.6}"))
            .unwrap_or_else(|| format!("{:>14}", "-"));
        println!("{q:>4} {:>14.6} {elas}", hybrid.lb.eigenvalues[q]);
    }

    // both bases are orthonormal under the mesh mass matrix
    println!(
        "orthonormality residuals: smooth {:.2e}, elastic {:.2e}",
        hybrid.lb.orthonormality_residual(),
        hybrid.elastic.orthonormality_residual()
    );
    Ok(())
}
