//! Spectral bases: Laplace-Beltrami and elastic eigenfunctions, the hybrid
//! basis, and feature projection into spectral coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{cotangent_laplacian, mass_matrix, TriangleMesh};
use crate::sparse::SparseOperator;

/// Mesh size above which the shift-invert Lanczos path takes over from the
/// dense generalized eigensolver. The dense path doubles as the oracle.
pub const DENSE_EIGEN_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    LB,
    Elastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EigenSolver {
    /// Pick dense below `DENSE_EIGEN_LIMIT`, iterative above.
    Auto,
    Dense,
    ShiftInvert,
}

/// Mass-orthonormal eigenbasis of one operator family on one mesh.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub functions: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub mass: SparseOperator,
    pub kind: BasisKind,
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.functions.nrows()
    }

    pub fn k(&self) -> usize {
        self.functions.ncols()
    }

    /// Mass-weighted projection A = Phi^T M F (the pseudoinverse for a
    /// mass-orthonormal basis).
    pub fn project(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.nrows() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "features have {} rows, basis has {}",
                features.nrows(),
                self.n()
            )));
        }
        Ok(self.functions.transpose() * self.mass.mul_mat(features))
    }

    /// ||Phi^T M Phi - I||_F, should stay below 1e-6.
    pub fn orthonormality_residual(&self) -> f64 {
        let gram = self.functions.transpose() * self.mass.mul_mat(&self.functions);
        (gram - DMatrix::identity(self.k(), self.k())).norm()
    }

    /// Groups eigenvalue indices into clusters with relative gap < 1e-8.
    /// Degenerate spectra should be compared via subspace projectors over
    /// these clusters, not individual columns.
    pub fn eigenvalue_clusters(&self) -> Vec<std::ops::Range<usize>> {
        let mut clusters = Vec::new();
        let mut start = 0;
        for q in 1..=self.eigenvalues.len() {
            let split = q == self.eigenvalues.len() || {
                let a = self.eigenvalues[q - 1];
                let b = self.eigenvalues[q];
                let scale = a.abs().max(b.abs()).max(1e-12);
                (b - a) / scale >= 1e-8
            };
            if split {
                clusters.push(start..q);
                start = q;
            }
        }
        clusters
    }
}

/// Concatenated LB + elastic basis.
#[derive(Debug, Clone)]
pub struct HybridBasis {
    pub lb: SpectralBasis,
    pub elastic: SpectralBasis,
}

impl HybridBasis {
    pub fn n(&self) -> usize {
        self.lb.n()
    }

    pub fn k_total(&self) -> usize {
        self.lb.k() + self.elastic.k()
    }

    /// n x (k_LB + k_Elas) concatenated view.
    pub fn concatenated(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, self.k_total());
        out.view_mut((0, 0), (n, self.lb.k())).copy_from(&self.lb.functions);
        out.view_mut((0, self.lb.k()), (n, self.elastic.k()))
            .copy_from(&self.elastic.functions);
        out
    }

    /// Stacked spectral coefficients [A_LB ; A_Elas] of shape (k_LB+k_Elas) x d.
    pub fn project(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let a_lb = self.lb.project(features)?;
        let a_el = self.elastic.project(features)?;
        let mut out = DMatrix::zeros(self.k_total(), features.ncols());
        out.view_mut((0, 0), (a_lb.nrows(), a_lb.ncols())).copy_from(&a_lb);
        out.view_mut((self.lb.k(), 0), (a_el.nrows(), a_el.ncols()))
            .copy_from(&a_el);
        Ok(out)
    }
}

/// Reduced mass matrix M_k = Psi^T M Psi of the elastic basis.
#[derive(Debug, Clone)]
pub struct ReducedMass {
    pub matrix: DMatrix<f64>,
}

impl ReducedMass {
    pub fn new(basis: &SpectralBasis) -> Result<Self> {
        let m = basis.functions.transpose() * basis.mass.mul_mat(&basis.functions);
        let sym = (&m + m.transpose()) * 0.5;
        if sym.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("reduced mass".into()));
        }
        Ok(Self { matrix: sym })
    }

    pub fn identity(k: usize) -> Self {
        Self { matrix: DMatrix::identity(k, k) }
    }

    pub fn k(&self) -> usize {
        self.matrix.nrows()
    }

    /// Lower Cholesky factor L with M_k = L L^T.
    pub fn cholesky_l(&self) -> Result<DMatrix<f64>> {
        self.matrix
            .clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::NotPositiveDefinite("reduced mass".into()))
    }
}

/// First k eigenpairs of the Laplace-Beltrami pencil (W, M), ascending,
/// mass-orthonormal, with a deterministic sign convention.
pub fn compute_lb_basis(mesh: &TriangleMesh, k: usize) -> Result<SpectralBasis> {
    compute_lb_basis_with(mesh, k, EigenSolver::Auto)
}

pub fn compute_lb_basis_with(
    mesh: &TriangleMesh,
    k: usize,
    solver: EigenSolver,
) -> Result<SpectralBasis> {
    let n = mesh.n_vertices();
    check_k(k, n)?;
    let w = cotangent_laplacian(mesh)?;
    let m = mass_matrix(mesh, true)?;
    let (functions, eigenvalues) = generalized_eigs(&w, &m, k, solver)?;
    Ok(SpectralBasis { functions, eigenvalues, mass: m, kind: BasisKind::LB })
}

/// First k eigenpairs of the thin-shell surrogate H = W + w_b * W M^-1 W
/// (membrane stiffness plus a quadratic bending term), mass-orthonormal.
pub fn compute_elastic_basis(
    mesh: &TriangleMesh,
    k: usize,
    bending_weight: f64,
) -> Result<SpectralBasis> {
    compute_elastic_basis_with(mesh, k, bending_weight, EigenSolver::Auto)
}

pub fn compute_elastic_basis_with(
    mesh: &TriangleMesh,
    k: usize,
    bending_weight: f64,
    solver: EigenSolver,
) -> Result<SpectralBasis> {
    let n = mesh.n_vertices();
    check_k(k, n)?;
    let w = cotangent_laplacian(mesh)?;
    let m = mass_matrix(mesh, true)?;
    let use_dense = match solver {
        EigenSolver::Dense => true,
        EigenSolver::ShiftInvert => false,
        EigenSolver::Auto => n <= DENSE_EIGEN_LIMIT,
    };
    let (functions, eigenvalues) = if use_dense {
        let wd = w.to_dense();
        let minv = DMatrix::from_diagonal(&m.diagonal().map(|v| 1.0 / v));
        let h = &wd + (&wd * minv * &wd) * bending_weight;
        dense_generalized_eigs_mat(&h, &m, k)?
    } else {
        let minv = m.diagonal().map(|v| 1.0 / v);
        let apply = |x: &DVector<f64>| {
            let wx = w.mul_vec(x);
            let bent = w.mul_vec(&minv.component_mul(&wx));
            wx + bent * bending_weight
        };
        shift_invert_lanczos(&apply, &m, n, k)?
    };
    Ok(SpectralBasis { functions, eigenvalues, mass: m, kind: BasisKind::Elastic })
}

/// Hybrid basis with both families computed on the same lumped mass.
pub fn compute_hybrid_basis(
    mesh: &TriangleMesh,
    k_lb: usize,
    k_elas: usize,
    bending_weight: f64,
) -> Result<HybridBasis> {
    Ok(HybridBasis {
        lb: compute_lb_basis(mesh, k_lb)?,
        elastic: compute_elastic_basis(mesh, k_elas, bending_weight)?,
    })
}

/// Spectral coefficients for either basis flavor: A = Phi^T M F.
pub fn project_features(basis: &SpectralBasis, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    basis.project(features)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k < 1 || k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    Ok(())
}

fn generalized_eigs(
    a: &SparseOperator,
    m: &SparseOperator,
    k: usize,
    solver: EigenSolver,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = a.rows();
    let use_dense = match solver {
        EigenSolver::Dense => true,
        EigenSolver::ShiftInvert => false,
        EigenSolver::Auto => n <= DENSE_EIGEN_LIMIT,
    };
    if use_dense {
        dense_generalized_eigs_mat(&a.to_dense(), m, k)
    } else {
        let apply = |x: &DVector<f64>| a.mul_vec(x);
        shift_invert_lanczos(&apply, m, n, k)
    }
}

/// Dense generalized symmetric eigensolve of (A, M) with M diagonal positive
/// (lumped) or SPD: whiten, symmetric eigen, unwhiten, sort ascending.
pub fn dense_generalized_eigs_mat(
    a: &DMatrix<f64>,
    m: &SparseOperator,
    k: usize,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = a.nrows();
    check_k(k, n)?;
    let (whitened, unwhiten): (DMatrix<f64>, Box<dyn Fn(&DMatrix<f64>) -> DMatrix<f64>>) =
        if m.is_diagonal() {
            let d = m.diagonal();
            if d.iter().any(|&v| v <= 0.0) {
                return Err(Error::NotPositiveDefinite("lumped mass".into()));
            }
            let dm12 = d.map(|v| 1.0 / v.sqrt());
            let mut s = a.clone();
            for i in 0..n {
                for j in 0..n {
                    s[(i, j)] *= dm12[i] * dm12[j];
                }
            }
            let dm12c = dm12.clone();
            (s, Box::new(move |u: &DMatrix<f64>| {
                let mut phi = u.clone();
                for i in 0..phi.nrows() {
                    for j in 0..phi.ncols() {
                        phi[(i, j)] *= dm12c[i];
                    }
                }
                phi
            }))
        } else {
            let md = m.to_dense();
            let chol = md
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("full mass".into()))?;
            let l = chol.l();
            // S = L^-1 A L^-T
            let linv_a = l
                .clone()
                .solve_lower_triangular(a)
                .ok_or_else(|| Error::EigensolveFailure("singular mass factor".into()))?;
            let s = l
                .clone()
                .solve_lower_triangular(&linv_a.transpose())
                .ok_or_else(|| Error::EigensolveFailure("singular mass factor".into()))?
                .transpose();
            let lt = l.transpose();
            (s, Box::new(move |u: &DMatrix<f64>| {
                lt.clone()
                    .solve_upper_triangular(u)
                    .expect("triangular solve")
            }))
        };
    let sym = (whitened.clone() + whitened.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let mut u = DMatrix::zeros(n, k);
    let mut vals = Vec::with_capacity(k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        u.set_column(col, &eig.eigenvectors.column(idx));
        vals.push(eig.eigenvalues[idx]);
    }
    let mut phi = unwhiten(&u);
    mass_orthonormalize(&mut phi, m);
    fix_signs(&mut phi);
    Ok((phi, vals))
}

/// Shift-invert Lanczos for the smallest generalized eigenpairs of
/// (A, M) with A PSD (given as a matvec) and M diagonal positive.
/// Runs Lanczos on (A + sigma M)^-1 M in the M-inner product; inner solves
/// use conjugate gradients.
pub fn shift_invert_lanczos(
    apply_a: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    m: &SparseOperator,
    n: usize,
    k: usize,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    check_k(k, n)?;
    let md = m.diagonal();
    if md.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositiveDefinite("lumped mass".into()));
    }
    // Shift keeps A + sigma M safely PD; scale from a probe Rayleigh quotient.
    let probe = DVector::from_fn(n, |i, _| ((i * 2654435761usize) % 1000) as f64 / 1000.0 - 0.5);
    let scale = probe.dot(&apply_a(&probe)).abs() / probe.dot(&(md.component_mul(&probe))).abs();
    let sigma = (scale * 1e-3).max(1e-10);
    let shifted = |x: &DVector<f64>| apply_a(x) + md.component_mul(x) * sigma;

    let m_steps = (2 * k + 20).min(n);
    let m_dot = |x: &DVector<f64>, y: &DVector<f64>| x.dot(&md.component_mul(y));

    // Clustered spectra (e.g. near-symmetric meshes) defeat a single Krylov
    // run: one starting vector yields one Ritz vector per eigenvalue cluster.
    // Restart with fresh vectors deflated against accepted pairs until k
    // residual-checked eigenpairs accumulate.
    // Stop only once a fresh deflated start finds nothing new below the
    // current k-th smallest value; a missed copy inside a cluster is exactly
    // what such a restart converges to first.
    let mut accepted: Vec<(f64, DVector<f64>)> = Vec::new();
    let mut settled = false;
    for restart in 0..12usize {
        if settled {
            break;
        }
        let salt = 40503 + restart * 7919;
        let mut v =
            DVector::from_fn(n, |i, _| (((i + 1) * salt) % 997) as f64 / 997.0 - 0.5);
        for (_, u) in &accepted {
            let c = m_dot(u, &v);
            v -= u * c;
        }
        let norm = m_dot(&v, &v).sqrt();
        if norm < 1e-12 {
            continue;
        }
        v /= norm;

        let mut alphas = Vec::with_capacity(m_steps);
        let mut betas = Vec::with_capacity(m_steps);
        let mut basis_vs: Vec<DVector<f64>> = Vec::with_capacity(m_steps);
        let mut v_prev: Option<DVector<f64>> = None;
        let mut beta_prev = 0.0;
        for _ in 0..m_steps {
            // w = Op v = (A + sigma M)^-1 M v
            let rhs = md.component_mul(&v);
            let mut w = cg_solve(&shifted, &rhs, &md, 1e-12, 10 * n)?;
            if let Some(vp) = &v_prev {
                w -= vp * beta_prev;
            }
            let alpha = m_dot(&v, &w);
            w -= &v * alpha;
            // full reorthogonalization (twice) in the M-inner product,
            // including against already-accepted eigenvectors
            for _ in 0..2 {
                for u in &basis_vs {
                    let c = m_dot(u, &w);
                    w -= u * c;
                }
                for (_, u) in &accepted {
                    let c = m_dot(u, &w);
                    w -= u * c;
                }
            }
            alphas.push(alpha);
            basis_vs.push(v.clone());
            let beta = m_dot(&w, &w).sqrt();
            if beta < 1e-14 {
                break;
            }
            betas.push(beta);
            v_prev = Some(v);
            v = w / beta;
            beta_prev = beta;
        }

        let steps = basis_vs.len();
        if steps == 0 {
            continue;
        }
        // Tridiagonal Ritz problem.
        let mut t = DMatrix::zeros(steps, steps);
        for i in 0..steps {
            t[(i, i)] = alphas[i];
            if i + 1 < steps {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let eig = t.symmetric_eigen();
        // Largest theta of the inverted operator = smallest lambda of the pencil.
        let mut order: Vec<usize> = (0..steps).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());

        let kth_before = if accepted.len() >= k {
            let mut vals: Vec<f64> = accepted.iter().map(|(l, _)| *l).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals[k - 1]
        } else {
            f64::INFINITY
        };
        let mut found_below = false;
        for &idx in &order {
            if accepted.len() >= k + m_steps {
                break;
            }
            let theta = eig.eigenvalues[idx];
            if theta <= 0.0 {
                continue;
            }
            let mut x = DVector::zeros(n);
            for (s, u) in basis_vs.iter().enumerate() {
                x += u * eig.eigenvectors[(s, idx)];
            }
            let xn = m_dot(&x, &x).sqrt();
            if xn < 1e-12 {
                continue;
            }
            x /= xn;
            // Rayleigh quotient refinement plus a residual gate.
            let ax = apply_a(&x);
            let lam = x.dot(&ax).max(0.0);
            let res = (&ax - md.component_mul(&x) * lam).norm();
            if res > 1e-7 * lam.max(1.0) * x.norm() {
                continue;
            }
            for (_, u) in &accepted {
                let c = m_dot(u, &x);
                x -= u * c;
            }
            let rn = m_dot(&x, &x).sqrt();
            if rn < 1e-6 {
                continue;
            }
            x /= rn;
            if lam < kth_before - 1e-8 * kth_before.max(1.0) {
                found_below = true;
            }
            accepted.push((lam, x));
        }
        if accepted.len() >= k && !found_below && restart > 0 {
            settled = true;
        }
    }
    if accepted.len() < k {
        return Err(Error::EigensolveFailure(format!(
            "Lanczos converged {} of {k} requested pairs",
            accepted.len()
        )));
    }
    accepted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    accepted.truncate(k);
    let mut phi = DMatrix::zeros(n, k);
    let mut vals = Vec::with_capacity(k);
    for (col, (lam, x)) in accepted.iter().enumerate() {
        phi.set_column(col, x);
        vals.push(*lam);
    }
    mass_orthonormalize(&mut phi, m);
    fix_signs(&mut phi);
    Ok((phi, vals))
}

fn cg_solve(
    apply: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    precond_diag: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let n = b.len();
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let inv_diag = precond_diag.map(|v| 1.0 / v.max(1e-300));
    let mut z = inv_diag.component_mul(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let b_norm = b.norm().max(1e-300);
    for _ in 0..max_iter {
        if r.norm() / b_norm < tol {
            return Ok(x);
        }
        let ap = apply(&p);
        let denom = p.dot(&ap);
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::EigensolveFailure("CG breakdown".into()));
        }
        let alpha = rz / denom;
        x += &p * alpha;
        r -= ap * alpha;
        z = inv_diag.component_mul(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = z.clone() + p * beta;
    }
    if r.norm() / b_norm < 1e-8 {
        Ok(x)
    } else {
        Err(Error::EigensolveFailure("CG did not converge".into()))
    }
}

/// Gram-Schmidt in the M-inner product; columns come in nearly orthonormal.
fn mass_orthonormalize(phi: &mut DMatrix<f64>, m: &SparseOperator) {
    let k = phi.ncols();
    for j in 0..k {
        let mut col = phi.column(j).clone_owned();
        for i in 0..j {
            let prev = phi.column(i).clone_owned();
            let c = prev.dot(&m.mul_vec(&col));
            col -= prev * c;
        }
        let norm = col.dot(&m.mul_vec(&col)).sqrt();
        if norm > 0.0 {
            col /= norm;
        }
        phi.set_column(j, &col);
    }
}

/// Sign convention: the first entry of each column whose magnitude exceeds
/// a relative threshold is made positive.
fn fix_signs(phi: &mut DMatrix<f64>) {
    for j in 0..phi.ncols() {
        let col = phi.column(j);
        let max_abs = col.amax();
        let thresh = max_abs * 1e-8;
        if let Some(first) = col.iter().find(|v| v.abs() > thresh) {
            if *first < 0.0 {
                let neg = -col.clone_owned();
                phi.set_column(j, &neg);
            }
        }
    }
}
