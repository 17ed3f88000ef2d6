//! Synthetic meshes for tests, examples, and demos.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mesh::TriangleMesh;

/// Regular tetrahedron with unit edge length.
pub fn tetrahedron() -> TriangleMesh {
    let s = 1.0 / (2.0_f64).sqrt();
    let vertices = vec![
        [1.0, 0.0, -s],
        [-1.0, 0.0, -s],
        [0.0, 1.0, s],
        [0.0, -1.0, s],
    ]
    .into_iter()
    .map(|v: [f64; 3]| [v[0] / 2.0, v[1] / 2.0, v[2] / 2.0])
    .collect();
    let faces = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
    TriangleMesh::new(vertices, faces, "tetrahedron").unwrap()
}

/// Unit-radius icosphere by repeated 4:1 subdivision of the icosahedron.
/// Subdivision 2 has 162 vertices and 320 faces.
pub fn icosphere(subdivisions: usize) -> TriangleMesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let normalize = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    for v in &mut vertices {
        *v = normalize(*v);
    }
    for _ in 0..subdivisions {
        let mut midpoint = std::collections::HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoint.entry(key).or_insert_with(|| {
                let va = vertices[a];
                let vb = vertices[b];
                let m = normalize([
                    (va[0] + vb[0]) / 2.0,
                    (va[1] + vb[1]) / 2.0,
                    (va[2] + vb[2]) / 2.0,
                ]);
                vertices.push(m);
                vertices.len() - 1
            })
        };
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            new_faces.push([a, ab, ca]);
            new_faces.push([b, bc, ab]);
            new_faces.push([c, ca, bc]);
            new_faces.push([ab, bc, ca]);
        }
        faces = new_faces;
    }
    TriangleMesh::new(vertices, faces, &format!("icosphere{subdivisions}")).unwrap()
}

/// Flat unit square, (div+1)^2 vertices, triangulated regularly.
pub fn square_grid(div: usize) -> TriangleMesh {
    let n = div + 1;
    let mut vertices = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            vertices.push([i as f64 / div as f64, j as f64 / div as f64, 0.0]);
        }
    }
    let mut faces = Vec::with_capacity(2 * div * div);
    for i in 0..div {
        for j in 0..div {
            let v00 = i * n + j;
            let v01 = i * n + j + 1;
            let v10 = (i + 1) * n + j;
            let v11 = (i + 1) * n + j + 1;
            faces.push([v00, v10, v11]);
            faces.push([v00, v11, v01]);
        }
    }
    TriangleMesh::new(vertices, faces, &format!("grid{div}")).unwrap()
}

/// UV sphere with `rings * segments + 2` vertices, radially deformed by an
/// asymmetric smooth bump field so that no two vertices are intrinsically
/// interchangeable. `rings = 18, segments = 11` gives exactly 200 vertices.
pub fn bumpy_sphere(rings: usize, segments: usize, bump: f64) -> TriangleMesh {
    use std::f64::consts::PI;
    let radius = |x: f64, y: f64, z: f64| {
        1.0 + bump * ((2.1 * x + 0.3).sin() * (1.7 * y - 0.5).cos() + 0.5 * (3.3 * z + 1.1).sin())
    };
    let mut vertices = Vec::with_capacity(rings * segments + 2);
    vertices.push([0.0, 0.0, radius(0.0, 0.0, 1.0)]); // north pole
    for r in 1..=rings {
        let theta = PI * r as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            let (x, y, z) = (theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let rad = radius(x, y, z);
            vertices.push([rad * x, rad * y, rad * z]);
        }
    }
    vertices.push([0.0, 0.0, -radius(0.0, 0.0, -1.0)]); // south pole
    let north = 0;
    let south = vertices.len() - 1;
    let idx = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([north, idx(1, s), idx(1, s + 1)]);
    }
    for r in 1..rings {
        for s in 0..segments {
            let a = idx(r, s);
            let b = idx(r, s + 1);
            let c = idx(r + 1, s);
            let d = idx(r + 1, s + 1);
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for s in 0..segments {
        faces.push([south, idx(rings, s + 1), idx(rings, s)]);
    }
    TriangleMesh::new(vertices, faces, "bumpy_sphere").unwrap()
}

/// Seeded random permutation of `0..n`.
pub fn random_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_on_unit_sphere() {
        let sphere = icosphere(2);
        for v in sphere.vertices() {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bumpy_sphere_vertex_count() {
        let mesh = bumpy_sphere(18, 11, 0.25);
        assert_eq!(mesh.n_vertices(), 200);
    }

    #[test]
    fn permuted_copy_preserves_geometry() {
        let mesh = icosphere(1);
        let perm = random_permutation(mesh.n_vertices(), 3);
        let copy = mesh.permuted(&perm, "copy").unwrap();
        assert!((copy.surface_area() - mesh.surface_area()).abs() < 1e-12);
        for (old, &new) in perm.iter().enumerate() {
            assert_eq!(copy.vertices()[new], mesh.vertices()[old]);
        }
    }
}
