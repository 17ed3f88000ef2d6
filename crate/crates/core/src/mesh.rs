//! Triangle meshes: loading, saving, and the discrete geometric operators.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::sparse::SparseOperator;

const MIN_FACE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
    PlyAscii,
}

impl MeshFormat {
    /// Guess from a file extension; OFF when unknown.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => MeshFormat::Obj,
            Some("ply") => MeshFormat::PlyAscii,
            _ => MeshFormat::Off,
        }
    }
}

/// Immutable triangle mesh. Vertex order is preserved exactly as loaded;
/// correspondence indices are vertex indices.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    name: String,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>, name: &str) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            name: name.to_string(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if n < 4 {
            return Err(Error::DegenerateMesh(format!("only {n} vertices, need >= 4")));
        }
        if self.faces.is_empty() {
            return Err(Error::DegenerateMesh("no faces".into()));
        }
        for f in &self.faces {
            for &i in f {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, n });
                }
            }
        }
        for (fi, _) in self.faces.iter().enumerate() {
            let a = self.face_area(fi);
            if !(a > MIN_FACE_AREA) {
                return Err(Error::DegenerateMesh(format!(
                    "face {fi} has area {a:.3e} <= {MIN_FACE_AREA:.0e}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.vertices[i])
    }

    pub fn face_area(&self, fi: usize) -> f64 {
        let [i, j, k] = self.faces[fi];
        let e1 = self.vertex(j) - self.vertex(i);
        let e2 = self.vertex(k) - self.vertex(i);
        0.5 * e1.cross(&e2).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Undirected edge list with Euclidean lengths, deduplicated.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut set = std::collections::BTreeSet::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter()
            .map(|(a, b)| (a, b, (self.vertex(a) - self.vertex(b)).norm()))
            .collect()
    }

    /// Returns a copy with vertices relabeled by `perm`: new vertex `perm[i]`
    /// is old vertex `i`.
    pub fn permuted(&self, perm: &[usize], name: &str) -> Result<Self> {
        assert_eq!(perm.len(), self.n_vertices());
        let mut vertices = vec![[0.0; 3]; self.n_vertices()];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = self.vertices[old];
        }
        let faces = self
            .faces
            .iter()
            .map(|f| [perm[f[0]], perm[f[1]], perm[f[2]]])
            .collect();
        Self::new(vertices, faces, name)
    }
}

fn tokens(line: &str) -> impl Iterator<Item = &str> {
    line.split('#').next().unwrap_or("").split_whitespace()
}

fn parse_f64(tok: &str, what: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad {what}: '{tok}'")))
}

fn parse_usize(tok: &str, what: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::Parse(format!("bad {what}: '{tok}'")))
}

/// Load a mesh from a byte stream. Vertex order is preserved verbatim.
pub fn load_mesh<R: Read>(source: R, format: MeshFormat, name: &str) -> Result<TriangleMesh> {
    let reader = BufReader::new(source);
    let lines: Vec<String> = reader
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(Error::Io)?;
    match format {
        MeshFormat::Off => load_off(&lines, name),
        MeshFormat::Obj => load_obj(&lines, name),
        MeshFormat::PlyAscii => load_ply(&lines, name),
    }
}

pub fn load_mesh_file(path: &std::path::Path) -> Result<TriangleMesh> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mesh")
        .to_string();
    let file = std::fs::File::open(path)?;
    load_mesh(file, MeshFormat::from_path(path), &name)
}

fn load_off(lines: &[String], name: &str) -> Result<TriangleMesh> {
    let mut toks = lines.iter().flat_map(|l| tokens(l));
    match toks.next() {
        Some("OFF") => {}
        other => return Err(Error::Parse(format!("expected OFF header, got {other:?}"))),
    }
    let mut next = || toks.next().ok_or_else(|| Error::Parse("truncated OFF".into()));
    let nv = parse_usize(next()?, "vertex count")?;
    let nf = parse_usize(next()?, "face count")?;
    let _ne = parse_usize(next()?, "edge count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let x = parse_f64(next()?, "coordinate")?;
        let y = parse_f64(next()?, "coordinate")?;
        let z = parse_f64(next()?, "coordinate")?;
        vertices.push([x, y, z]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let arity = parse_usize(next()?, "face arity")?;
        if arity != 3 {
            return Err(Error::Parse(format!("non-triangle face (arity {arity})")));
        }
        let a = parse_usize(next()?, "face index")?;
        let b = parse_usize(next()?, "face index")?;
        let c = parse_usize(next()?, "face index")?;
        faces.push([a, b, c]);
    }
    TriangleMesh::new(vertices, faces, name)
}

fn load_obj(lines: &[String], name: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for line in lines {
        let mut toks = tokens(line);
        match toks.next() {
            Some("v") => {
                let mut coord = [0.0; 3];
                for c in &mut coord {
                    *c = parse_f64(
                        toks.next().ok_or_else(|| Error::Parse("short vertex line".into()))?,
                        "coordinate",
                    )?;
                }
                vertices.push(coord);
            }
            Some("f") => {
                let idx: Vec<usize> = toks
                    .map(|t| {
                        // "f v", "f v/vt", "f v/vt/vn" all start with the vertex index
                        let v = t.split('/').next().unwrap();
                        parse_usize(v, "face index")
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(Error::Parse(format!("non-triangle face ({} indices)", idx.len())));
                }
                for &i in &idx {
                    if i == 0 {
                        return Err(Error::Parse("OBJ face index 0 (indices are 1-based)".into()));
                    }
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces, name)
}

fn load_ply(lines: &[String], name: &str) -> Result<TriangleMesh> {
    let mut it = lines.iter();
    match it.next().map(|l| l.trim()) {
        Some("ply") => {}
        other => return Err(Error::Parse(format!("expected ply header, got {other:?}"))),
    }
    let mut nv = None;
    let mut nf = None;
    let mut saw_format = false;
    for line in it.by_ref() {
        let toks: Vec<&str> = tokens(line).collect();
        match toks.as_slice() {
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => {
                return Err(Error::Parse(format!("unsupported PLY format '{other}'")))
            }
            ["element", "vertex", n] => nv = Some(parse_usize(n, "vertex count")?),
            ["element", "face", n] => nf = Some(parse_usize(n, "face count")?),
            ["end_header"] => break,
            _ => {}
        }
    }
    if !saw_format {
        return Err(Error::Parse("PLY missing format line".into()));
    }
    let nv = nv.ok_or_else(|| Error::Parse("PLY missing vertex element".into()))?;
    let nf = nf.ok_or_else(|| Error::Parse("PLY missing face element".into()))?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = it.next().ok_or_else(|| Error::Parse("truncated PLY vertices".into()))?;
        let toks: Vec<&str> = tokens(line).collect();
        if toks.len() < 3 {
            return Err(Error::Parse("short PLY vertex line".into()));
        }
        vertices.push([
            parse_f64(toks[0], "coordinate")?,
            parse_f64(toks[1], "coordinate")?,
            parse_f64(toks[2], "coordinate")?,
        ]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let line = it.next().ok_or_else(|| Error::Parse("truncated PLY faces".into()))?;
        let toks: Vec<&str> = tokens(line).collect();
        let arity = parse_usize(toks.first().copied().unwrap_or(""), "face arity")?;
        if arity != 3 || toks.len() < 4 {
            return Err(Error::Parse(format!("non-triangle PLY face (arity {arity})")));
        }
        faces.push([
            parse_usize(toks[1], "face index")?,
            parse_usize(toks[2], "face index")?,
            parse_usize(toks[3], "face index")?,
        ]);
    }
    TriangleMesh::new(vertices, faces, name)
}

/// Write OFF. Uses shortest round-trippable float formatting so that
/// load -> save -> load reproduces vertices bit-exactly.
pub fn save_off<W: Write>(mesh: &TriangleMesh, mut out: W) -> Result<()> {
    writeln!(out, "OFF")?;
    writeln!(out, "{} {} 0", mesh.n_vertices(), mesh.n_faces())?;
    for v in mesh.vertices() {
        writeln!(out, "{} {} {}", v[0], v[1], v[2])?;
    }
    for f in mesh.faces() {
        writeln!(out, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

/// Cotangent stiffness matrix W: symmetric PSD, off-diagonal
/// w_ij = -(cot a_ij + cot b_ij)/2 over faces sharing edge (i,j), zero row sums.
/// Non-manifold edges accumulate over all incident faces.
pub fn cotangent_laplacian(mesh: &TriangleMesh) -> Result<SparseOperator> {
    let n = mesh.n_vertices();
    let mut triplets = Vec::with_capacity(mesh.n_faces() * 12);
    for f in mesh.faces() {
        // cotangent at corner c, opposite edge (a, b)
        for (c, a, b) in [(f[0], f[1], f[2]), (f[1], f[2], f[0]), (f[2], f[0], f[1])] {
            let u = mesh.vertex(a) - mesh.vertex(c);
            let v = mesh.vertex(b) - mesh.vertex(c);
            let cross = u.cross(&v).norm();
            let cot = u.dot(&v) / cross;
            if !cot.is_finite() {
                return Err(Error::DegenerateMesh("non-finite cotangent".into()));
            }
            let w = 0.5 * cot;
            triplets.push((a, b, -w));
            triplets.push((b, a, -w));
            triplets.push((a, a, w));
            triplets.push((b, b, w));
        }
    }
    SparseOperator::from_triplets(n, n, triplets, true)
}

/// Mass matrix: lumped (barycentric, diagonal) or full Galerkin.
pub fn mass_matrix(mesh: &TriangleMesh, lumped: bool) -> Result<SparseOperator> {
    let n = mesh.n_vertices();
    let mut triplets = Vec::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        let area = mesh.face_area(fi);
        if !(area > MIN_FACE_AREA) {
            return Err(Error::DegenerateMesh(format!("face {fi} area {area:.3e}")));
        }
        if lumped {
            for &v in f {
                triplets.push((v, v, area / 3.0));
            }
        } else {
            for &v in f {
                triplets.push((v, v, area / 6.0));
            }
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                triplets.push((a, b, area / 12.0));
                triplets.push((b, a, area / 12.0));
            }
        }
    }
    SparseOperator::from_triplets(n, n, triplets, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn off_tetrahedron_roundtrip() {
        let tet = synthetic::tetrahedron();
        assert_eq!(tet.n_vertices(), 4);
        assert_eq!(tet.n_faces(), 4);
        let mut buf = Vec::new();
        save_off(&tet, &mut buf).unwrap();
        let reloaded = load_mesh(&buf[..], MeshFormat::Off, "tet").unwrap();
        assert_eq!(reloaded.vertices(), tet.vertices());
        assert_eq!(reloaded.faces(), tet.faces());
    }

    #[test]
    fn obj_out_of_range_index() {
        let obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 10\n";
        let err = load_mesh(obj.as_bytes(), MeshFormat::Obj, "bad");
        assert!(matches!(err, Err(Error::IndexOutOfRange { index: 9, .. })));
    }

    #[test]
    fn obj_with_texture_indices() {
        let obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n\
                   f 1/1 2/2 3/3\nf 1/1/1 2/2/2 4/4/4\n";
        let mesh = load_mesh(obj.as_bytes(), MeshFormat::Obj, "tex").unwrap();
        assert_eq!(mesh.n_faces(), 2);
    }

    #[test]
    fn ply_ascii_tetrahedron() {
        let ply = "ply\nformat ascii 1.0\nelement vertex 4\n\
                   property float x\nproperty float y\nproperty float z\n\
                   element face 4\nproperty list uchar int vertex_indices\nend_header\n\
                   0 0 0\n1 0 0\n0 1 0\n0 0 1\n\
                   3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n";
        let mesh = load_mesh(ply.as_bytes(), MeshFormat::PlyAscii, "tet").unwrap();
        assert_eq!(mesh.n_vertices(), 4);
        assert_eq!(mesh.n_faces(), 4);
    }

    #[test]
    fn icosphere_counts() {
        let sphere = synthetic::icosphere(2);
        assert_eq!(sphere.n_vertices(), 162);
        assert_eq!(sphere.n_faces(), 320);
    }

    #[test]
    fn degenerate_face_rejected() {
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let err = TriangleMesh::new(verts, vec![[0, 1, 2]], "flat");
        assert!(matches!(err, Err(Error::DegenerateMesh(_))));
    }

    #[test]
    fn laplacian_annihilates_constants() {
        let sphere = synthetic::icosphere(1);
        let w = cotangent_laplacian(&sphere).unwrap();
        let ones = DVector::from_element(sphere.n_vertices(), 1.0);
        assert!(w.mul_vec(&ones).amax() < 1e-9);
        assert!(w.symmetry_residual() < 1e-12);
    }

    #[test]
    fn laplacian_square_split_on_diagonal() {
        // Unit square split into two right triangles along the diagonal (0,0)-(1,1).
        // Interior diagonal edge: both opposite angles are 90 deg -> weight 0.
        // Boundary edges: opposite angle 45 deg -> weight cot(45)/2 = 1/2.
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let faces = vec![[0, 1, 2], [0, 2, 3]];
        let mesh = TriangleMesh::new(verts, faces, "square").unwrap();
        let w = cotangent_laplacian(&mesh).unwrap().to_dense();
        assert_relative_eq!(w[(0, 1)], -0.5, epsilon = 1e-12);
        assert_relative_eq!(w[(1, 2)], -0.5, epsilon = 1e-12);
        assert_relative_eq!(w[(2, 3)], -0.5, epsilon = 1e-12);
        assert_relative_eq!(w[(0, 3)], -0.5, epsilon = 1e-12);
        assert_relative_eq!(w[(0, 2)], 0.0, epsilon = 1e-12);
        for i in 0..4 {
            let row_sum: f64 = (0..4).map(|j| w[(i, j)]).sum();
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_psd_random_vectors() {
        use rand::{Rng, SeedableRng};
        let sphere = synthetic::icosphere(1);
        let w = cotangent_laplacian(&sphere).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = DVector::from_fn(sphere.n_vertices(), |_, _| rng.gen_range(-1.0..1.0));
            assert!(x.dot(&w.mul_vec(&x)) >= -1e-9);
        }
    }

    #[test]
    fn lumped_mass_partitions_area() {
        let tet = synthetic::tetrahedron();
        let m = mass_matrix(&tet, true).unwrap();
        assert!(m.is_diagonal());
        assert_relative_eq!(m.sum(), tet.surface_area(), epsilon = 1e-9);
        assert!(m.diagonal().iter().all(|&v| v > 0.0));

        let sphere = synthetic::icosphere(1);
        let m = mass_matrix(&sphere, true).unwrap();
        assert_relative_eq!(m.sum(), sphere.surface_area(), epsilon = 1e-9);
    }

    #[test]
    fn single_triangle_lumped_entries() {
        // Embed a single triangle in a 4-vertex mesh so invariants hold,
        // then check the A/3 rule on a face-by-face basis.
        let tet = synthetic::tetrahedron();
        let m = mass_matrix(&tet, true).unwrap().diagonal();
        // Regular tetrahedron: each vertex touches 3 faces of equal area A.
        let a = tet.face_area(0);
        for &v in m.iter() {
            assert_relative_eq!(v, a, epsilon = 1e-12); // 3 * A/3
        }
    }

    #[test]
    fn full_vs_lumped_quadratic_form() {
        let sphere = synthetic::icosphere(2);
        let lumped = mass_matrix(&sphere, true).unwrap();
        let full = mass_matrix(&sphere, false).unwrap();
        let z = DVector::from_iterator(
            sphere.n_vertices(),
            sphere.vertices().iter().map(|v| v[2]),
        );
        let ql = z.dot(&lumped.mul_vec(&z));
        let qf = z.dot(&full.mul_vec(&z));
        assert!((ql - qf).abs() / qf.abs() < 0.05, "ql={ql} qf={qf}");
        assert_relative_eq!(full.sum(), sphere.surface_area(), epsilon = 1e-9);
    }
}
