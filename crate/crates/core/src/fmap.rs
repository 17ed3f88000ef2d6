//! Regularized hybrid functional map solvers and conversions between the
//! spectral and spatial map representations.

use nalgebra::{DMatrix, DVector};

use crate::assign::PointMap;
use crate::basis::{HybridBasis, ReducedMass};
use crate::error::{Error, Result};

/// Block-diagonal functional map between hybrid bases:
/// full C = diag(c11, c22).
#[derive(Debug, Clone)]
pub struct FunctionalMap {
    pub c11: DMatrix<f64>,
    pub c22: DMatrix<f64>,
    pub source: String,
    pub target: String,
}

impl FunctionalMap {
    pub fn new(c11: DMatrix<f64>, c22: DMatrix<f64>, source: &str, target: &str) -> Result<Self> {
        if c11.iter().chain(c22.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("functional map".into()));
        }
        Ok(Self { c11, c22, source: source.into(), target: target.into() })
    }

    pub fn identity(k_lb: usize, k_elas: usize, source: &str, target: &str) -> Self {
        Self {
            c11: DMatrix::identity(k_lb, k_lb),
            c22: DMatrix::identity(k_elas, k_elas),
            source: source.into(),
            target: target.into(),
        }
    }

    pub fn k_lb(&self) -> usize {
        self.c11.nrows()
    }

    pub fn k_elas(&self) -> usize {
        self.c22.nrows()
    }

    pub fn k_total(&self) -> usize {
        self.k_lb() + self.k_elas()
    }

    /// Assembled block-diagonal matrix.
    pub fn full(&self) -> DMatrix<f64> {
        let k = self.k_total();
        let mut c = DMatrix::zeros(k, k);
        c.view_mut((0, 0), (self.k_lb(), self.k_lb())).copy_from(&self.c11);
        c.view_mut((self.k_lb(), self.k_lb()), (self.k_elas(), self.k_elas()))
            .copy_from(&self.c22);
        c
    }

    /// Split a full (k_lb+k_elas) square matrix back into blocks.
    pub fn from_full(full: &DMatrix<f64>, k_lb: usize, source: &str, target: &str) -> Result<Self> {
        let k = full.nrows();
        if full.ncols() != k || k_lb > k {
            return Err(Error::ShapeMismatch("functional map block split".into()));
        }
        let k_elas = k - k_lb;
        Self::new(
            full.view((0, 0), (k_lb, k_lb)).clone_owned(),
            full.view((k_lb, k_lb), (k_elas, k_elas)).clone_owned(),
            source,
            target,
        )
    }
}

fn jittered_solve(mut lhs: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let k = lhs.nrows();
    if let Some(chol) = lhs.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    let jitter = 1e-12 * lhs.trace().abs().max(1e-300) / k as f64;
    for i in 0..k {
        lhs[(i, i)] += jitter;
    }
    lhs.clone()
        .cholesky()
        .map(|c| c.solve(rhs))
        .or_else(|| lhs.lu().solve(rhs))
        .ok_or_else(|| Error::SingularSystem("regularized row system".into()))
}

/// Minimizer of ||C A_i - A_j||_F^2 + lambda ||C Lam_i - Lam_j C||_F^2,
/// solved row-wise: row q solves (A_i A_i^T + lambda D_q) c_q = A_i a_{j,q}
/// with D_q = diag((lam_i_p - lam_j_q)^2).
pub fn solve_lb_map(
    a_i: &DMatrix<f64>,
    a_j: &DMatrix<f64>,
    lam_i: &[f64],
    lam_j: &[f64],
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let k = a_i.nrows();
    if a_j.nrows() != k || a_i.ncols() != a_j.ncols() || lam_i.len() != k || lam_j.len() != k {
        return Err(Error::ShapeMismatch("solve_lb_map inputs".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    let gram = a_i * a_i.transpose();
    let mut c = DMatrix::zeros(k, k);
    for q in 0..k {
        let mut lhs = gram.clone();
        for p in 0..k {
            let d = lam_i[p] - lam_j[q];
            lhs[(p, p)] += lambda * d * d;
        }
        let rhs = a_i * a_j.row(q).transpose();
        let cq = jittered_solve(lhs, &rhs)?;
        c.row_mut(q).copy_from(&cq.transpose());
    }
    Ok(c)
}

/// Minimizer of ||C A_i - A_j||^2_{M} + lambda ||C Lam_i - Lam_j C||^2_{HS}
/// where ||X||^2_M = tr(X^T M X) and the HS norm carries the same reduced
/// mass weight. Solved exactly in whitened coordinates B = L^T C (M = L L^T)
/// via the stacked normal equations over vec(B).
pub fn solve_elastic_map(
    a_i: &DMatrix<f64>,
    a_j: &DMatrix<f64>,
    lam_i: &[f64],
    lam_j: &[f64],
    reduced_mass: &ReducedMass,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let k = a_i.nrows();
    if a_j.nrows() != k || a_i.ncols() != a_j.ncols() || lam_i.len() != k || lam_j.len() != k {
        return Err(Error::ShapeMismatch("solve_elastic_map inputs".into()));
    }
    if reduced_mass.k() != k {
        return Err(Error::ShapeMismatch("reduced mass size".into()));
    }
    let l = reduced_mass.cholesky_l()?;
    let lt = l.transpose();
    // Whitened data target and the conjugated spectral multiplier.
    let target = &lt * a_j; // L^T A_j
    let lam_j_mat = DMatrix::from_diagonal(&DVector::from_row_slice(lam_j));
    // N = L^T Lam_j L^-T, obtained from L N^T = Lam_j L.
    let n_mat = l
        .solve_lower_triangular(&(&lam_j_mat * &l))
        .ok_or_else(|| Error::NotPositiveDefinite("mass factor".into()))?
        .transpose();
    // Normal matrix over vec(B), column-major:
    //   (A_i A_i^T) (x) I  +  lambda K^T K,   K = (Lam_i (x) I) - (I (x) N)
    let gram = a_i * a_i.transpose();
    let kk = k * k;
    let mut normal = DMatrix::zeros(kk, kk);
    for p in 0..k {
        for q in 0..k {
            let g = gram[(p, q)];
            if g != 0.0 {
                for r in 0..k {
                    normal[(p * k + r, q * k + r)] += g;
                }
            }
        }
    }
    // K entries: block (col p of B) couples to itself via lam_i_p I - N
    // vec layout: index (p*k + r) is B[r, p].
    let mut kmat = DMatrix::zeros(kk, kk);
    for p in 0..k {
        for r in 0..k {
            kmat[(p * k + r, p * k + r)] += lam_i[p];
            for s in 0..k {
                kmat[(p * k + r, p * k + s)] -= n_mat[(r, s)];
            }
        }
    }
    normal += (kmat.transpose() * &kmat) * lambda;
    let rhs_mat = &target * a_i.transpose(); // L^T A_j A_i^T
    let rhs = DVector::from_column_slice(rhs_mat.as_slice());
    let sol = {
        let mut lhs = normal.clone();
        if let Some(chol) = lhs.clone().cholesky() {
            chol.solve(&rhs)
        } else {
            let jitter = 1e-12 * lhs.trace().abs().max(1e-300) / kk as f64;
            for i in 0..kk {
                lhs[(i, i)] += jitter;
            }
            lhs.clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .or_else(|| lhs.lu().solve(&rhs))
                .ok_or_else(|| Error::SingularSystem("elastic normal equations".into()))?
        }
    };
    let residual = (&normal * &sol - &rhs).norm() / rhs.norm().max(1.0);
    if residual > 1e-8 {
        return Err(Error::SingularSystem(format!(
            "elastic normal-equation residual {residual:.3e}"
        )));
    }
    let b = DMatrix::from_column_slice(k, k, sol.as_slice());
    // C = L^-T B
    lt.solve_upper_triangular(&b)
        .ok_or_else(|| Error::NotPositiveDefinite("mass factor".into()))
}

/// Evaluates the elastic objective ||C A_i - A_j||^2_M + lambda tr(Y^T M Y),
/// Y = C Lam_i - Lam_j C. Exposed for optimality probes.
pub fn elastic_objective(
    c: &DMatrix<f64>,
    a_i: &DMatrix<f64>,
    a_j: &DMatrix<f64>,
    lam_i: &[f64],
    lam_j: &[f64],
    reduced_mass: &ReducedMass,
    lambda: f64,
) -> f64 {
    let m = &reduced_mass.matrix;
    let x = c * a_i - a_j;
    let data = (x.transpose() * m * &x).trace();
    let k = c.nrows();
    let mut y = c.clone();
    for q in 0..k {
        for p in 0..k {
            y[(q, p)] = c[(q, p)] * (lam_i[p] - lam_j[q]);
        }
    }
    let reg = (y.transpose() * m * &y).trace();
    data + lambda * reg
}

/// LB-block objective ||C A_i - A_j||_F^2 + lambda ||C Lam_i - Lam_j C||_F^2.
pub fn lb_objective(
    c: &DMatrix<f64>,
    a_i: &DMatrix<f64>,
    a_j: &DMatrix<f64>,
    lam_i: &[f64],
    lam_j: &[f64],
    lambda: f64,
) -> f64 {
    let data = (c * a_i - a_j).norm_squared();
    let k = c.nrows();
    let mut reg = 0.0;
    for q in 0..k {
        for p in 0..k {
            let y = c[(q, p)] * (lam_i[p] - lam_j[q]);
            reg += y * y;
        }
    }
    data + lambda * reg
}

/// Per-shape data the pairwise solver consumes.
pub struct ShapeSpectral<'a> {
    pub name: &'a str,
    pub basis: &'a HybridBasis,
    pub features: &'a DMatrix<f64>,
}

/// Solves both blocks of the hybrid map between two shapes.
pub fn solve_hybrid_map(
    shape_i: &ShapeSpectral,
    shape_j: &ShapeSpectral,
    lambda_lb: f64,
    lambda_elas: f64,
) -> Result<FunctionalMap> {
    let a_i_lb = shape_i.basis.lb.project(shape_i.features)?;
    let a_j_lb = shape_j.basis.lb.project(shape_j.features)?;
    let c11 = solve_lb_map(
        &a_i_lb,
        &a_j_lb,
        &shape_i.basis.lb.eigenvalues,
        &shape_j.basis.lb.eigenvalues,
        lambda_lb,
    )?;
    let a_i_el = shape_i.basis.elastic.project(shape_i.features)?;
    let a_j_el = shape_j.basis.elastic.project(shape_j.features)?;
    let mk_j = ReducedMass::new(&shape_j.basis.elastic)?;
    let c22 = solve_elastic_map(
        &a_i_el,
        &a_j_el,
        &shape_i.basis.elastic.eigenvalues,
        &shape_j.basis.elastic.eigenvalues,
        &mk_j,
        lambda_elas,
    )?;
    FunctionalMap::new(c11, c22, shape_i.name, shape_j.name)
}

/// Spectral map induced by a point map: block q = basis_j^T M_j Pi_ji basis_i,
/// LB with LB and elastic with elastic.
pub fn fmap_from_pointmap(
    pi_ji: &PointMap,
    basis_i: &HybridBasis,
    basis_j: &HybridBasis,
) -> Result<FunctionalMap> {
    if pi_ji.n_source() != basis_j.n() || pi_ji.n_target() != basis_i.n() {
        return Err(Error::ShapeMismatch(format!(
            "point map is {}x{}, bases are n_j={} n_i={}",
            pi_ji.n_source(),
            pi_ji.n_target(),
            basis_j.n(),
            basis_i.n()
        )));
    }
    let block = |phi_i: &DMatrix<f64>, phi_j: &DMatrix<f64>, mass_j: &crate::sparse::SparseOperator| {
        let pulled = pi_ji.apply(phi_i); // n_j x k
        phi_j.transpose() * mass_j.mul_mat(&pulled)
    };
    let c11 = block(&basis_i.lb.functions, &basis_j.lb.functions, &basis_j.lb.mass);
    let c22 = block(
        &basis_i.elastic.functions,
        &basis_j.elastic.functions,
        &basis_j.elastic.mass,
    );
    FunctionalMap::new(c11, c22, &pi_ji.target, &pi_ji.source)
}

/// Nearest-neighbor conversion: target vertex t of shape j maps to
/// argmin_s ||(Phi_j C)[t,:] - Phi_i[s,:]||, ties broken by lowest index.
pub fn pointmap_from_fmap(
    c_ij: &FunctionalMap,
    basis_i: &HybridBasis,
    basis_j: &HybridBasis,
) -> Result<PointMap> {
    if basis_i.k_total() != c_ij.k_total() || basis_j.k_total() != c_ij.k_total() {
        return Err(Error::ShapeMismatch("basis / map block sizes".into()));
    }
    let embedded = basis_j.concatenated() * c_ij.full(); // n_j x K
    let anchor = basis_i.concatenated(); // n_i x K
    let n_j = embedded.nrows();
    let n_i = anchor.nrows();
    let mut indices = Vec::with_capacity(n_j);
    for t in 0..n_j {
        let row = embedded.row(t);
        let mut best = (f64::INFINITY, 0usize);
        for s in 0..n_i {
            let d2 = (row - anchor.row(s)).norm_squared();
            if d2 < best.0 {
                best = (d2, s);
            }
        }
        indices.push(best.1);
    }
    PointMap::hard(indices, n_i, &c_ij.target, &c_ij.source)
}

/// Universe-style map C_ij = A_j A_i^+ per block partition.
/// Requires A_i to have full row rank in each block.
pub fn universe_fmap(
    a_i: &DMatrix<f64>,
    a_j: &DMatrix<f64>,
    k_lb: usize,
    source: &str,
    target: &str,
) -> Result<FunctionalMap> {
    let k = a_i.nrows();
    if a_j.nrows() != k || a_i.ncols() != a_j.ncols() || k_lb > k {
        return Err(Error::ShapeMismatch("universe_fmap inputs".into()));
    }
    let block = |rows: std::ops::Range<usize>| -> Result<DMatrix<f64>> {
        let bi = a_i.rows(rows.start, rows.len()).clone_owned();
        let bj = a_j.rows(rows.start, rows.len()).clone_owned();
        Ok(&bj * pseudoinverse(&bi)?)
    };
    let c11 = block(0..k_lb)?;
    let c22 = block(k_lb..k)?;
    FunctionalMap::new(c11, c22, source, target)
}

/// Right pseudoinverse A^+ = A^T (A A^T)^-1 for full-row-rank A.
pub fn pseudoinverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let sigma_min = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(sigma_min > 1e-10) {
        return Err(Error::RankDeficient { sigma_min });
    }
    svd.pseudo_inverse(1e-12)
        .map_err(|e| Error::SingularSystem(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::compute_hybrid_basis;
    use crate::descriptor::wks_descriptors;
    use crate::synthetic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn lb_identity_on_matched_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 4, 8);
        let lam = vec![0.0, 1.0, 2.5, 4.0];
        let c = solve_lb_map(&a, &a, &lam, &lam, 100.0).unwrap();
        assert!((c - DMatrix::identity(4, 4)).norm() < 1e-6);
    }

    #[test]
    fn lb_zero_reg_matches_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a_i = rand_mat(&mut rng, 3, 7);
        let a_j = rand_mat(&mut rng, 3, 7);
        let lam = vec![0.1, 0.2, 0.3];
        let c = solve_lb_map(&a_i, &a_j, &lam, &lam, 0.0).unwrap();
        let oracle = &a_j * pseudoinverse(&a_i).unwrap();
        assert!((c - oracle).norm() < 1e-8);
    }

    #[test]
    fn lb_local_optimality_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a_i = rand_mat(&mut rng, 3, 5);
        let a_j = rand_mat(&mut rng, 3, 5);
        let lam_i = vec![0.0, 1.0, 3.0];
        let lam_j = vec![0.0, 1.2, 2.7];
        let c = solve_lb_map(&a_i, &a_j, &lam_i, &lam_j, 100.0).unwrap();
        let base = lb_objective(&c, &a_i, &a_j, &lam_i, &lam_j, 100.0);
        for _ in 0..50 {
            let e = rand_mat(&mut rng, 3, 3);
            let perturbed = &c + e * 1e-4;
            let obj = lb_objective(&perturbed, &a_i, &a_j, &lam_i, &lam_j, 100.0);
            assert!(obj >= base - 1e-12);
        }
    }

    #[test]
    fn elastic_identity_mass_matches_lb() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a_i = rand_mat(&mut rng, 3, 6);
        let a_j = rand_mat(&mut rng, 3, 6);
        let lam_i = vec![0.0, 1.0, 2.0];
        let lam_j = vec![0.1, 0.9, 2.2];
        let mk = ReducedMass::identity(3);
        let ce = solve_elastic_map(&a_i, &a_j, &lam_i, &lam_j, &mk, 50.0).unwrap();
        let cl = solve_lb_map(&a_i, &a_j, &lam_i, &lam_j, 50.0).unwrap();
        assert!((ce - cl).norm() < 1e-9);
    }

    #[test]
    fn elastic_identity_on_matched_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 4, 9);
        let lam = vec![0.0, 1.0, 2.0, 3.0];
        let spd = {
            let b = rand_mat(&mut rng, 4, 4);
            &b * b.transpose() + DMatrix::identity(4, 4)
        };
        let mk = ReducedMass { matrix: spd };
        let c = solve_elastic_map(&a, &a, &lam, &lam, &mk, 50.0).unwrap();
        assert!((c - DMatrix::identity(4, 4)).norm() < 1e-6);
    }

    #[test]
    fn elastic_minimizer_dominates_lb_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a_i = rand_mat(&mut rng, 3, 6);
        let a_j = rand_mat(&mut rng, 3, 6);
        let lam_i = vec![0.0, 1.0, 2.5];
        let lam_j = vec![0.2, 1.3, 2.1];
        let spd = {
            let b = rand_mat(&mut rng, 3, 3);
            &b * b.transpose() + DMatrix::identity(3, 3) * 0.5
        };
        let mk = ReducedMass { matrix: spd };
        let ce = solve_elastic_map(&a_i, &a_j, &lam_i, &lam_j, &mk, 50.0).unwrap();
        let cl = solve_lb_map(&a_i, &a_j, &lam_i, &lam_j, 50.0).unwrap();
        let obj_e = elastic_objective(&ce, &a_i, &a_j, &lam_i, &lam_j, &mk, 50.0);
        let obj_l = elastic_objective(&cl, &a_i, &a_j, &lam_i, &lam_j, &mk, 50.0);
        assert!(obj_e <= obj_l + 1e-10, "obj_e={obj_e} obj_l={obj_l}");
    }

    #[test]
    fn hybrid_self_map_is_identity() {
        let sphere = synthetic::bumpy_sphere(8, 7, 0.3);
        let basis = compute_hybrid_basis(&sphere, 10, 4, 1.0).unwrap();
        let wks = wks_descriptors(&basis.lb, 24, 7.0).unwrap();
        let shape = ShapeSpectral { name: "s", basis: &basis, features: &wks.values };
        let c = solve_hybrid_map(&shape, &shape, 100.0, 50.0).unwrap();
        assert!((c.c11 - DMatrix::identity(10, 10)).norm() < 1e-6);
        assert!((c.c22 - DMatrix::identity(4, 4)).norm() < 1e-6);
    }

    #[test]
    fn permuted_copy_recovery() {
        let mesh = synthetic::bumpy_sphere(8, 7, 0.3);
        let perm = synthetic::random_permutation(mesh.n_vertices(), 17);
        let copy = mesh.permuted(&perm, "copy").unwrap();
        let b1 = compute_hybrid_basis(&mesh, 12, 5, 1.0).unwrap();
        let b2 = compute_hybrid_basis(&copy, 12, 5, 1.0).unwrap();
        let w1 = wks_descriptors(&b1.lb, 24, 7.0).unwrap();
        let w2 = wks_descriptors(&b2.lb, 24, 7.0).unwrap();
        let s1 = ShapeSpectral { name: "a", basis: &b1, features: &w1.values };
        let s2 = ShapeSpectral { name: "b", basis: &b2, features: &w2.values };
        let c = solve_hybrid_map(&s1, &s2, 100.0, 50.0).unwrap();
        let pi = pointmap_from_fmap(&c, &b1, &b2).unwrap();
        // Pi_ji maps copy vertex t to original vertex s; ground truth is perm^-1
        let hard = pi.hard_indices().unwrap();
        let mut correct = 0;
        for (orig, &new) in perm.iter().enumerate() {
            if hard[new] == orig {
                correct += 1;
            }
        }
        let frac = correct as f64 / mesh.n_vertices() as f64;
        assert!(frac >= 0.95, "recovered {frac:.3}");
    }

    #[test]
    fn fmap_from_identity_pointmap() {
        let sphere = synthetic::icosphere(1);
        let basis = compute_hybrid_basis(&sphere, 6, 3, 1.0).unwrap();
        let n = sphere.n_vertices();
        let pi = PointMap::hard((0..n).collect(), n, "s", "s").unwrap();
        let c = fmap_from_pointmap(&pi, &basis, &basis).unwrap();
        assert!((c.c11 - DMatrix::identity(6, 6)).norm() < 1e-6);
        assert!((c.c22 - DMatrix::identity(3, 3)).norm() < 1e-6);
    }

    #[test]
    fn fmap_constructions_agree_on_permutation() {
        let mesh = synthetic::bumpy_sphere(8, 7, 0.3);
        let perm = synthetic::random_permutation(mesh.n_vertices(), 23);
        let copy = mesh.permuted(&perm, "copy").unwrap();
        let b1 = compute_hybrid_basis(&mesh, 10, 4, 1.0).unwrap();
        let b2 = compute_hybrid_basis(&copy, 10, 4, 1.0).unwrap();
        let w1 = wks_descriptors(&b1.lb, 24, 7.0).unwrap();
        let w2 = wks_descriptors(&b2.lb, 24, 7.0).unwrap();
        let s1 = ShapeSpectral { name: "a", basis: &b1, features: &w1.values };
        let s2 = ShapeSpectral { name: "b", basis: &b2, features: &w2.values };
        let c_solved = solve_hybrid_map(&s1, &s2, 100.0, 50.0).unwrap();
        // exact point map: copy vertex perm[v] corresponds to original v
        let n = mesh.n_vertices();
        let mut indices = vec![0usize; n];
        for (orig, &new) in perm.iter().enumerate() {
            indices[new] = orig;
        }
        let pi = PointMap::hard(indices, n, "b", "a").unwrap();
        let c_from_pi = fmap_from_pointmap(&pi, &b1, &b2).unwrap();
        assert!((&c_solved.c11 - &c_from_pi.c11).norm() < 0.1);
        assert!((&c_solved.c22 - &c_from_pi.c22).norm() < 0.1);
    }

    #[test]
    fn fmap_from_soft_pointmap_is_projection() {
        let sphere = synthetic::icosphere(1);
        let basis = compute_hybrid_basis(&sphere, 5, 3, 1.0).unwrap();
        let n = sphere.n_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut weights = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.1..1.0));
        for mut row in weights.row_iter_mut() {
            let s: f64 = row.iter().sum();
            row /= s;
        }
        let pi = PointMap::soft(weights.clone(), "s", "s").unwrap();
        let c = fmap_from_pointmap(&pi, &basis, &basis).unwrap();
        assert!(c.full().iter().all(|v| v.is_finite()));
        // mass-weighted LS oracle: min_C ||Phi C - Pi Phi||_M per block
        let md = basis.lb.mass.to_dense();
        let phi = basis.lb.functions.clone();
        let target = &weights * &phi;
        let oracle = (phi.transpose() * &md * &phi)
            .lu()
            .solve(&(phi.transpose() * &md * target))
            .unwrap();
        assert!((&c.c11 - &oracle).norm() < 1e-8);
    }

    #[test]
    fn pointmap_identity_for_identity_map() {
        let sphere = synthetic::icosphere(1);
        let basis = compute_hybrid_basis(&sphere, 6, 3, 1.0).unwrap();
        let c = FunctionalMap::identity(6, 3, "s", "s");
        let pi = pointmap_from_fmap(&c, &basis, &basis).unwrap();
        let hard = pi.hard_indices().unwrap();
        for (t, &s) in hard.iter().enumerate() {
            assert_eq!(t, s);
        }
    }

    #[test]
    fn pointmap_matches_bruteforce_scan() {
        // pointmap_from_fmap is itself a quadratic scan; this pins the
        // argmin/tie-break contract against an independent implementation.
        let sphere = synthetic::icosphere(1);
        let basis = compute_hybrid_basis(&sphere, 6, 3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = FunctionalMap::new(
            rand_mat(&mut rng, 6, 6),
            rand_mat(&mut rng, 3, 3),
            "s",
            "s",
        )
        .unwrap();
        let pi = pointmap_from_fmap(&c, &basis, &basis).unwrap();
        let hard = pi.hard_indices().unwrap();
        let emb = basis.concatenated() * c.full();
        let anchor = basis.concatenated();
        for t in 0..emb.nrows() {
            let mut best = (f64::INFINITY, 0usize);
            for s in (0..anchor.nrows()).rev() {
                let d2 = (emb.row(t) - anchor.row(s)).norm_squared();
                if d2 <= best.0 {
                    best = (d2, s); // reverse scan with <= lands on lowest index
                }
            }
            assert_eq!(hard[t], best.1);
        }
    }

    #[test]
    fn universe_fmap_identity_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_mat(&mut rng, 6, 14);
        let c = universe_fmap(&a, &a, 4, "i", "i").unwrap();
        assert!((c.full() - DMatrix::identity(6, 6)).norm() < 1e-8);

        let r1 = rand_mat(&mut rng, 6, 6);
        let r2 = rand_mat(&mut rng, 6, 6);
        // block-diagonal transports so the block partition is respected
        let blockify = |m: &DMatrix<f64>| {
            let mut b = m.clone();
            for i in 0..4 {
                for j in 4..6 {
                    b[(i, j)] = 0.0;
                    b[(j, i)] = 0.0;
                }
            }
            b
        };
        let a_i = a.clone();
        let a_j = blockify(&r1) * &a;
        let a_k = blockify(&r2) * &a;
        let c_ij = universe_fmap(&a_i, &a_j, 4, "i", "j").unwrap();
        let c_jk = universe_fmap(&a_j, &a_k, 4, "j", "k").unwrap();
        let c_ki = universe_fmap(&a_k, &a_i, 4, "k", "i").unwrap();
        let composed = c_ki.full() * c_jk.full() * c_ij.full();
        assert!((&composed * &a_i - &a_i).norm() < 1e-6);
    }

    #[test]
    fn universe_fmap_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut a = rand_mat(&mut rng, 4, 10);
        let dup = a.row(0).clone_owned();
        a.row_mut(1).copy_from(&dup);
        assert!(matches!(
            universe_fmap(&a, &a, 2, "i", "j"),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn roundtrip_fixed_point_on_permutation() {
        let mesh = synthetic::bumpy_sphere(8, 7, 0.3);
        let perm = synthetic::random_permutation(mesh.n_vertices(), 31);
        let copy = mesh.permuted(&perm, "copy").unwrap();
        let b1 = compute_hybrid_basis(&mesh, 12, 5, 1.0).unwrap();
        let b2 = compute_hybrid_basis(&copy, 12, 5, 1.0).unwrap();
        let n = mesh.n_vertices();
        let mut indices = vec![0usize; n];
        for (orig, &new) in perm.iter().enumerate() {
            indices[new] = orig;
        }
        let pi = PointMap::hard(indices.clone(), n, "b", "a").unwrap();
        let c = fmap_from_pointmap(&pi, &b1, &b2).unwrap();
        let recovered = pointmap_from_fmap(&c, &b1, &b2).unwrap();
        assert_eq!(recovered.hard_indices().unwrap(), indices);
    }
}
