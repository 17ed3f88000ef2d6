//! Unsupervised objectives over a shape collection, their analytic
//! gradients, a finite-difference verifier, and a small-scale optimizer.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assign::sinkhorn;
use crate::error::{Error, Result};
use crate::fmap::{pseudoinverse, FunctionalMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleVariant {
    Frobenius,
    Cosine,
}

/// Index order of the elastic coupling term. `AsPrinted` compares C_ij
/// against pinv(Psi_i) Pi_ji^T Psi_j; `Transposed` against
/// pinv(Psi_j) Pi_ji Psi_i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingOrder {
    AsPrinted,
    Transposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bij: f64,
    pub lambda_orth: f64,
    pub lambda_couple: f64,
    pub lambda_cycle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_bij: 1.0, lambda_orth: 1.0, lambda_couple: 1.0, lambda_cycle: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_bij, self.lambda_orth, self.lambda_couple, self.lambda_cycle];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairLossRow {
    pub i: usize,
    pub j: usize,
    pub bij: f64,
    pub orth: f64,
    pub couple: f64,
    pub cycle: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub bij: f64,
    pub orth: f64,
    pub couple: f64,
    pub cycle: f64,
    pub spectral: f64,
    pub total: f64,
    pub per_pair: Vec<PairLossRow>,
}

/// One shape's spectral data as the losses see it: hybrid basis values,
/// coefficients, and the reduced elastic mass for the weighted norm.
#[derive(Debug, Clone)]
pub struct ShapeEntry {
    pub name: String,
    /// n x k hybrid basis values; columns [0, k_lb) are the smoothness
    /// family, the rest the deformation family.
    pub phi: DMatrix<f64>,
    pub k_lb: usize,
    /// k x d projected feature coefficients.
    pub coefficients: DMatrix<f64>,
    /// SPD reduced mass on the deformation block, identity when unused.
    pub elastic_mass: DMatrix<f64>,
}

impl ShapeEntry {
    pub fn new(
        name: &str,
        phi: DMatrix<f64>,
        k_lb: usize,
        coefficients: DMatrix<f64>,
        elastic_mass: DMatrix<f64>,
    ) -> Result<Self> {
        let k = phi.ncols();
        if k_lb > k {
            return Err(Error::DimensionMismatch(format!("k_lb {k_lb} > k {k}")));
        }
        if coefficients.nrows() != k {
            return Err(Error::DimensionMismatch("coefficient rows != basis cols".into()));
        }
        let k_elas = k - k_lb;
        if elastic_mass.nrows() != k_elas || elastic_mass.ncols() != k_elas {
            return Err(Error::DimensionMismatch("elastic mass size".into()));
        }
        Ok(Self { name: name.into(), phi, k_lb, coefficients, elastic_mass })
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn k(&self) -> usize {
        self.phi.ncols()
    }

    pub fn k_elas(&self) -> usize {
        self.k() - self.k_lb
    }

    pub fn d(&self) -> usize {
        self.coefficients.ncols()
    }

    fn phi_lb(&self) -> DMatrix<f64> {
        self.phi.columns(0, self.k_lb).into_owned()
    }

    fn phi_elas(&self) -> DMatrix<f64> {
        self.phi.columns(self.k_lb, self.k_elas()).into_owned()
    }

    /// Basis-expanded coefficients, n x d.
    fn expanded(&self) -> DMatrix<f64> {
        &self.phi * &self.coefficients
    }
}

/// Everything the collection losses read: per-shape spectra, the active
/// ordered pair list, one functional map per ordered pair, and per-shape
/// universe logits with their normalized soft assignments.
#[derive(Debug, Clone)]
pub struct CollectionState {
    pub shapes: Vec<ShapeEntry>,
    pub pairs: Vec<(usize, usize)>,
    pub maps: BTreeMap<(usize, usize), FunctionalMap>,
    /// Pre-normalization scores, one n_i x c matrix per shape.
    pub logits: Vec<DMatrix<f64>>,
    /// Normalized soft assignments, kept in sync with `logits`.
    pub assignments: Vec<DMatrix<f64>>,
    pub temperature: f64,
    pub sinkhorn_iters: usize,
    pub coupling_order: CouplingOrder,
}

impl CollectionState {
    pub fn new(
        shapes: Vec<ShapeEntry>,
        pairs: Vec<(usize, usize)>,
        maps: BTreeMap<(usize, usize), FunctionalMap>,
        logits: Vec<DMatrix<f64>>,
        temperature: f64,
        sinkhorn_iters: usize,
        coupling_order: CouplingOrder,
    ) -> Result<Self> {
        if logits.len() != shapes.len() {
            return Err(Error::DimensionMismatch("one logit matrix per shape".into()));
        }
        let c = logits.first().map(|l| l.ncols()).unwrap_or(0);
        for (s, l) in shapes.iter().zip(&logits) {
            if l.nrows() != s.n() || l.ncols() != c {
                return Err(Error::DimensionMismatch(format!(
                    "logits for {} must be {} x {c}",
                    s.name,
                    s.n()
                )));
            }
        }
        for &(i, j) in &pairs {
            if i >= shapes.len() || j >= shapes.len() || i == j {
                return Err(Error::Config(format!("bad pair ({i}, {j})")));
            }
        }
        let mut state = Self {
            shapes,
            pairs,
            maps,
            logits,
            assignments: Vec::new(),
            temperature,
            sinkhorn_iters,
            coupling_order,
        };
        state.refresh_assignments()?;
        Ok(state)
    }

    pub fn c(&self) -> usize {
        self.logits.first().map(|l| l.ncols()).unwrap_or(0)
    }

    /// Recomputes the soft assignments from the current logits.
    pub fn refresh_assignments(&mut self) -> Result<()> {
        self.assignments = self
            .logits
            .iter()
            .map(|l| sinkhorn(l, self.sinkhorn_iters, self.temperature))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    fn map(&self, i: usize, j: usize) -> Result<&FunctionalMap> {
        self.maps.get(&(i, j)).ok_or(Error::MissingMap(i, j))
    }

    /// Soft Pi_ji = Pi_j Pi_i^T, rows over shape j vertices.
    fn soft_pairwise(&self, i: usize, j: usize) -> DMatrix<f64> {
        &self.assignments[j] * self.assignments[i].transpose()
    }
}

fn frob2(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn sub_identity(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for q in 0..m.nrows().min(m.ncols()) {
        m[(q, q)] -= 1.0;
    }
    m
}

/// Bijectivity and orthogonality residuals, summed over both map orders
/// and both diagonal blocks.
pub fn structural_loss(c_ij: &FunctionalMap, c_ji: &FunctionalMap) -> Result<(f64, f64)> {
    if c_ij.k_lb() != c_ji.k_lb() || c_ij.k_elas() != c_ji.k_elas() {
        return Err(Error::ShapeMismatch("block sizes differ".into()));
    }
    let mut bij = 0.0;
    let mut orth = 0.0;
    for (a, b) in [(&c_ij.c11, &c_ji.c11), (&c_ij.c22, &c_ji.c22)] {
        bij += frob2(&sub_identity(a * b)) + frob2(&sub_identity(b * a));
        orth += frob2(&sub_identity(a.transpose() * a)) + frob2(&sub_identity(b.transpose() * b));
    }
    Ok((bij, orth))
}

/// Single-order halves of `structural_loss`; summing these over both
/// ordered pairs reproduces it.
fn structural_half(c_ij: &FunctionalMap, c_ji: &FunctionalMap) -> (f64, f64) {
    let mut bij = 0.0;
    let mut orth = 0.0;
    for (a, b) in [(&c_ij.c11, &c_ji.c11), (&c_ij.c22, &c_ji.c22)] {
        bij += frob2(&sub_identity(a * b));
        orth += frob2(&sub_identity(a.transpose() * a));
    }
    (bij, orth)
}

/// Targets the functional map should agree with: the smoothness-family
/// projection of Pi_ji and the deformation-family projection in the
/// configured index order.
struct CouplingTargets {
    x_lb: DMatrix<f64>,
    y_el: DMatrix<f64>,
    // factors kept for the chain rule through Pi
    p_lb: DMatrix<f64>,
    q_lb: DMatrix<f64>,
    r_el: DMatrix<f64>,
    s_el: DMatrix<f64>,
}

fn coupling_targets(
    pi_ji: &DMatrix<f64>,
    source: &ShapeEntry,
    target: &ShapeEntry,
    order: CouplingOrder,
) -> Result<CouplingTargets> {
    if pi_ji.nrows() != target.n() || pi_ji.ncols() != source.n() {
        return Err(Error::ShapeMismatch(format!(
            "point map is {} x {}, expected {} x {}",
            pi_ji.nrows(),
            pi_ji.ncols(),
            target.n(),
            source.n()
        )));
    }
    if source.k_lb != target.k_lb || source.k_elas() != target.k_elas() {
        return Err(Error::ShapeMismatch("spectral block sizes differ".into()));
    }
    let p_lb = pseudoinverse(&target.phi_lb())?;
    let q_lb = source.phi_lb();
    let x_lb = &p_lb * pi_ji * &q_lb;
    let (r_el, s_el, y_el) = if source.k_elas() == 0 {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
    } else {
        match order {
            CouplingOrder::AsPrinted => {
                let r = pseudoinverse(&source.phi_elas())?;
                let s = target.phi_elas();
                let y = &r * pi_ji.transpose() * &s;
                (r, s, y)
            }
            CouplingOrder::Transposed => {
                let r = pseudoinverse(&target.phi_elas())?;
                let s = source.phi_elas();
                let y = &r * pi_ji * &s;
                (r, s, y)
            }
        }
    };
    Ok(CouplingTargets { x_lb, y_el, p_lb, q_lb, r_el, s_el })
}

/// Spectral/spatial coupling residual: plain Frobenius on the smoothness
/// block, reduced-mass-weighted Frobenius on the deformation block. The
/// weighting mass is the target shape's.
pub fn coupling_loss(
    c_ij: &FunctionalMap,
    pi_ji: &DMatrix<f64>,
    source: &ShapeEntry,
    target: &ShapeEntry,
    order: CouplingOrder,
) -> Result<f64> {
    if c_ij.k_lb() != source.k_lb || c_ij.k_elas() != source.k_elas() {
        return Err(Error::ShapeMismatch("map blocks vs shape spectra".into()));
    }
    let t = coupling_targets(pi_ji, source, target, order)?;
    let d_lb = &c_ij.c11 - &t.x_lb;
    let mut loss = frob2(&d_lb);
    if source.k_elas() > 0 {
        let d_el = &c_ij.c22 - &t.y_el;
        loss += (d_el.transpose() * &target.elastic_mass * &d_el).trace();
    }
    Ok(loss)
}

/// Universe embedding Pi^T Phi A of one shape, c x d.
pub fn universe_embedding(pi: &DMatrix<f64>, shape: &ShapeEntry) -> DMatrix<f64> {
    pi.transpose() * shape.expanded()
}

fn cosine_row_loss(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let nx = x.norm();
    let ny = y.norm();
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    1.0 - x.dot(y) / (nx * ny)
}

fn cycle_pair_loss(e_i: &DMatrix<f64>, e_j: &DMatrix<f64>, variant: CycleVariant) -> f64 {
    match variant {
        CycleVariant::Frobenius => frob2(&(e_i - e_j)),
        CycleVariant::Cosine => {
            let c = e_i.nrows();
            let mut acc = 0.0;
            for u in 0..c {
                acc += cosine_row_loss(
                    &e_i.row(u).transpose().into_owned(),
                    &e_j.row(u).transpose().into_owned(),
                );
            }
            acc / c as f64
        }
    }
}

/// Disagreement between universe embeddings, summed over the given
/// ordered pairs.
pub fn cycle_loss(
    assignments: &[DMatrix<f64>],
    shapes: &[ShapeEntry],
    pairs: &[(usize, usize)],
    variant: CycleVariant,
) -> Result<f64> {
    if assignments.len() != shapes.len() {
        return Err(Error::ShapeMismatch("one assignment per shape".into()));
    }
    let c = assignments.first().map(|a| a.ncols()).unwrap_or(0);
    for (a, s) in assignments.iter().zip(shapes) {
        if a.nrows() != s.n() || a.ncols() != c {
            return Err(Error::ShapeMismatch(format!("assignment shape for {}", s.name)));
        }
    }
    let embeddings: Vec<DMatrix<f64>> = assignments
        .iter()
        .zip(shapes)
        .map(|(pi, s)| universe_embedding(pi, s))
        .collect();
    let mut loss = 0.0;
    for &(i, j) in pairs {
        loss += cycle_pair_loss(&embeddings[i], &embeddings[j], variant);
    }
    Ok(loss)
}

/// Full collection objective with per-pair breakdown. The spectral part
/// aggregates bijectivity, orthogonality, and coupling; the total adds
/// the weighted cycle term.
pub fn total_loss(
    state: &CollectionState,
    weights: &LossWeights,
    variant: CycleVariant,
) -> Result<LossReport> {
    weights.validate()?;
    let embeddings: Vec<DMatrix<f64>> = state
        .assignments
        .iter()
        .zip(&state.shapes)
        .map(|(pi, s)| universe_embedding(pi, s))
        .collect();
    let mut per_pair = Vec::with_capacity(state.pairs.len());
    let (mut bij, mut orth, mut couple, mut cycle) = (0.0, 0.0, 0.0, 0.0);
    for &(i, j) in &state.pairs {
        let c_ij = state.map(i, j)?;
        let c_ji = state.map(j, i)?;
        let (b, o) = structural_half(c_ij, c_ji);
        let pi_ji = state.soft_pairwise(i, j);
        let cp = coupling_loss(c_ij, &pi_ji, &state.shapes[i], &state.shapes[j], state.coupling_order)?;
        let cy = cycle_pair_loss(&embeddings[i], &embeddings[j], variant);
        bij += b;
        orth += o;
        couple += cp;
        cycle += cy;
        per_pair.push(PairLossRow { i, j, bij: b, orth: o, couple: cp, cycle: cy });
    }
    let spectral =
        weights.lambda_bij * bij + weights.lambda_orth * orth + weights.lambda_couple * couple;
    let total = spectral + weights.lambda_cycle * cycle;
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(LossReport { bij, orth, couple, cycle, spectral, total, per_pair })
}

/// Gradients of the weighted total w.r.t. every functional-map block and
/// every soft assignment entry.
#[derive(Debug, Clone)]
pub struct LossGradients {
    /// d total / d (c11, c22) per ordered pair.
    pub d_c: BTreeMap<(usize, usize), (DMatrix<f64>, DMatrix<f64>)>,
    /// d total / d Pi_i, one n_i x c matrix per shape.
    pub d_pi: Vec<DMatrix<f64>>,
}

fn grad_cosine_rows(e_i: &DMatrix<f64>, e_j: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    // d/dx and d/dy of sum_rows (1 - cos(x_u, y_u)) / c
    let c = e_i.nrows();
    let d = e_i.ncols();
    let mut g_i = DMatrix::zeros(c, d);
    let mut g_j = DMatrix::zeros(c, d);
    for u in 0..c {
        let x = e_i.row(u);
        let y = e_j.row(u);
        let nx = x.norm();
        let ny = y.norm();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        let dot = x.dot(&y);
        for t in 0..d {
            g_i[(u, t)] = (-y[t] / (nx * ny) + dot * x[t] / (nx * nx * nx * ny)) / c as f64;
            g_j[(u, t)] = (-x[t] / (nx * ny) + dot * y[t] / (ny * ny * ny * nx)) / c as f64;
        }
    }
    (g_i, g_j)
}

pub fn loss_gradients(
    state: &CollectionState,
    weights: &LossWeights,
    variant: CycleVariant,
) -> Result<LossGradients> {
    weights.validate()?;
    let n_shapes = state.shapes.len();
    let c = state.c();
    let mut d_pi: Vec<DMatrix<f64>> =
        state.shapes.iter().map(|s| DMatrix::zeros(s.n(), c)).collect();
    let mut d_c: BTreeMap<(usize, usize), (DMatrix<f64>, DMatrix<f64>)> = BTreeMap::new();
    for &(i, j) in &state.pairs {
        let m = state.map(i, j)?;
        d_c.insert(
            (i, j),
            (DMatrix::zeros(m.k_lb(), m.k_lb()), DMatrix::zeros(m.k_elas(), m.k_elas())),
        );
    }
    let expanded: Vec<DMatrix<f64>> = state.shapes.iter().map(|s| s.expanded()).collect();
    let embeddings: Vec<DMatrix<f64>> = state
        .assignments
        .iter()
        .zip(&expanded)
        .map(|(pi, b)| pi.transpose() * b)
        .collect();

    for &(i, j) in &state.pairs {
        let c_ij = state.map(i, j)?;
        let c_ji = state.map(j, i)?;
        // bijectivity: || C_ij C_ji - I ||^2 touches both maps
        for (block, (a, b)) in [(0usize, (&c_ij.c11, &c_ji.c11)), (1, (&c_ij.c22, &c_ji.c22))] {
            let resid = sub_identity(a * b);
            let ga = &resid * b.transpose() * (2.0 * weights.lambda_bij);
            let gb = a.transpose() * &resid * (2.0 * weights.lambda_bij);
            let go = a * sub_identity(a.transpose() * a) * (4.0 * weights.lambda_orth);
            let slot_ij = d_c.get_mut(&(i, j)).unwrap();
            let target_ij = if block == 0 { &mut slot_ij.0 } else { &mut slot_ij.1 };
            *target_ij += ga + go;
            let slot_ji = d_c.get_mut(&(j, i)).unwrap();
            let target_ji = if block == 0 { &mut slot_ji.0 } else { &mut slot_ji.1 };
            *target_ji += gb;
        }

        // coupling
        let pi_ji = state.soft_pairwise(i, j);
        let src = &state.shapes[i];
        let tgt = &state.shapes[j];
        let t = coupling_targets(&pi_ji, src, tgt, state.coupling_order)?;
        let d_lb = &c_ij.c11 - &t.x_lb;
        let mut g_pi_ji = t.p_lb.transpose() * &d_lb * t.q_lb.transpose()
            * (-2.0 * weights.lambda_couple);
        {
            let slot = d_c.get_mut(&(i, j)).unwrap();
            slot.0 += &d_lb * (2.0 * weights.lambda_couple);
        }
        if src.k_elas() > 0 {
            let d_el = &c_ij.c22 - &t.y_el;
            let g_y = &tgt.elastic_mass * &d_el * (-2.0 * weights.lambda_couple);
            match state.coupling_order {
                CouplingOrder::AsPrinted => {
                    // Y = R Pi^T S => dL/dPi = S (dL/dY)^T R
                    g_pi_ji += &t.s_el * g_y.transpose() * &t.r_el;
                }
                CouplingOrder::Transposed => {
                    g_pi_ji += t.r_el.transpose() * &g_y * t.s_el.transpose();
                }
            }
            let slot = d_c.get_mut(&(i, j)).unwrap();
            slot.1 += &tgt.elastic_mass * &d_el * (2.0 * weights.lambda_couple);
        }
        // Pi_ji = Pi_j Pi_i^T
        d_pi[j] += &g_pi_ji * &state.assignments[i];
        d_pi[i] += g_pi_ji.transpose() * &state.assignments[j];

        // cycle
        match variant {
            CycleVariant::Frobenius => {
                let delta = (&embeddings[i] - &embeddings[j]) * (2.0 * weights.lambda_cycle);
                d_pi[i] += &expanded[i] * delta.transpose();
                d_pi[j] -= &expanded[j] * delta.transpose();
            }
            CycleVariant::Cosine => {
                let (g_i, g_j) = grad_cosine_rows(&embeddings[i], &embeddings[j]);
                d_pi[i] += &expanded[i] * g_i.transpose() * weights.lambda_cycle;
                d_pi[j] += &expanded[j] * g_j.transpose() * weights.lambda_cycle;
            }
        }
    }
    for g in d_pi.iter().take(n_shapes) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("assignment gradient".into()));
        }
    }
    Ok(LossGradients { d_c, d_pi })
}

/// Max over coordinates of |central difference - analytic| / (|analytic| + 1e-12).
pub fn finite_diff_check<F>(f: F, point: &DVector<f64>, grad: &DVector<f64>, step: f64) -> f64
where
    F: Fn(&DVector<f64>) -> f64,
{
    assert!(step > 0.0);
    let mut worst = 0.0f64;
    for t in 0..point.len() {
        let mut plus = point.clone();
        let mut minus = point.clone();
        plus[t] += step;
        minus[t] -= step;
        let fd = (f(&plus) - f(&minus)) / (2.0 * step);
        let dev = (fd - grad[t]).abs() / (grad[t].abs() + 1e-12);
        worst = worst.max(dev);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizeVars {
    COnly,
    PiOnly,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTraceRow {
    pub step: usize,
    pub bij: f64,
    pub orth: f64,
    pub couple: f64,
    pub cycle: f64,
    pub total: f64,
}

fn trace_row(step: usize, r: &LossReport) -> LossTraceRow {
    LossTraceRow { step, bij: r.bij, orth: r.orth, couple: r.couple, cycle: r.cycle, total: r.total }
}

/// Gradient descent on the total objective. Functional-map blocks use the
/// analytic gradient; assignment logits are differentiated through the
/// normalization by forward differences (no unrolled derivative).
pub fn desk_optimize(
    mut state: CollectionState,
    weights: &LossWeights,
    variant: CycleVariant,
    steps: usize,
    rate: f64,
    vars: OptimizeVars,
) -> Result<(CollectionState, Vec<LossTraceRow>)> {
    weights.validate()?;
    if !rate.is_finite() || rate < 0.0 {
        return Err(Error::Config("rate must be finite and >= 0".into()));
    }
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(trace_row(0, &total_loss(&state, weights, variant)?));
    if rate == 0.0 {
        for step in 1..=steps {
            let row = trace[0].clone();
            trace.push(LossTraceRow { step, ..row });
        }
        return Ok((state, trace));
    }
    let fd_step = 1e-6;
    for step in 1..=steps {
        let grads = loss_gradients(&state, weights, variant)?;
        if matches!(vars, OptimizeVars::PiOnly | OptimizeVars::Both) {
            // chain d total / d Pi through the normalization, one logit
            // entry at a time
            for s in 0..state.shapes.len() {
                let base = &state.assignments[s];
                let g_pi = &grads.d_pi[s];
                let mut g_logit = DMatrix::zeros(base.nrows(), base.ncols());
                for v in 0..base.nrows() {
                    for u in 0..base.ncols() {
                        let mut bumped = state.logits[s].clone();
                        bumped[(v, u)] += fd_step;
                        let pi_plus = sinkhorn(&bumped, state.sinkhorn_iters, state.temperature)?;
                        let mut acc = 0.0;
                        for (p, (b, g)) in pi_plus.iter().zip(base.iter().zip(g_pi.iter())) {
                            acc += (p - b) / fd_step * g;
                        }
                        g_logit[(v, u)] = acc;
                    }
                }
                state.logits[s] -= g_logit * rate;
            }
            state.refresh_assignments()?;
        }
        if matches!(vars, OptimizeVars::COnly | OptimizeVars::Both) {
            for (&key, (g1, g2)) in &grads.d_c {
                let m = state.maps.get_mut(&key).expect("gradient key");
                m.c11 -= g1 * rate;
                m.c22 -= g2 * rate;
            }
        }
        let report = total_loss(&state, weights, variant)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite("optimization diverged".into()));
        }
        trace.push(trace_row(step, &report));
    }
    Ok((state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmap(c11: DMatrix<f64>, c22: DMatrix<f64>) -> FunctionalMap {
        FunctionalMap::new(c11, c22, "a", "b").unwrap()
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Mass-orthonormal-ish random shape entry (orthonormal columns via QR).
    fn rand_shape(rng: &mut ChaCha8Rng, name: &str, n: usize, k_lb: usize, k_el: usize, d: usize) -> ShapeEntry {
        let raw = rand_mat(rng, n, k_lb + k_el);
        let phi = raw.qr().q();
        let a = rand_mat(rng, k_lb + k_el, d);
        ShapeEntry::new(name, phi, k_lb, a, DMatrix::identity(k_el, k_el)).unwrap()
    }

    fn consistent_state(n_shapes: usize, n: usize, c: usize, k_lb: usize, k_el: usize, d: usize) -> CollectionState {
        // identical shapes, identical near-one-hot logits, identity maps
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let proto = rand_shape(&mut rng, "s", n, k_lb, k_el, d);
        let shapes: Vec<ShapeEntry> = (0..n_shapes)
            .map(|i| ShapeEntry { name: format!("s{i}"), ..proto.clone() })
            .collect();
        assert!(c >= n);
        let mut logits = DMatrix::from_element(n, c, -1e4);
        for v in 0..n {
            logits[(v, v)] = 1e4;
        }
        let mut pairs = Vec::new();
        let mut maps = BTreeMap::new();
        for i in 0..n_shapes {
            for j in 0..n_shapes {
                if i != j {
                    pairs.push((i, j));
                    maps.insert((i, j), FunctionalMap::identity(k_lb, k_el, "i", "j"));
                }
            }
        }
        CollectionState::new(
            shapes,
            pairs,
            maps,
            vec![logits; n_shapes],
            0.07,
            30,
            CouplingOrder::AsPrinted,
        )
        .unwrap()
    }

    fn random_state(seed: u64, n_shapes: usize, n: usize, c: usize) -> CollectionState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k_lb, k_el, d) = (3, 2, 4);
        let shapes: Vec<ShapeEntry> = (0..n_shapes)
            .map(|i| rand_shape(&mut rng, &format!("s{i}"), n, k_lb, k_el, d))
            .collect();
        let logits: Vec<DMatrix<f64>> = (0..n_shapes).map(|_| rand_mat(&mut rng, n, c)).collect();
        let mut pairs = Vec::new();
        let mut maps = BTreeMap::new();
        for i in 0..n_shapes {
            for j in 0..n_shapes {
                if i != j {
                    pairs.push((i, j));
                    maps.insert(
                        (i, j),
                        fmap(rand_mat(&mut rng, k_lb, k_lb), rand_mat(&mut rng, k_el, k_el)),
                    );
                }
            }
        }
        CollectionState::new(shapes, pairs, maps, logits, 0.07, 10, CouplingOrder::AsPrinted)
            .unwrap()
    }

    #[test]
    fn structural_identity_zero() {
        let c = FunctionalMap::identity(3, 2, "a", "b");
        let (b, o) = structural_loss(&c, &c).unwrap();
        assert_eq!(b, 0.0);
        assert_eq!(o, 0.0);
    }

    #[test]
    fn structural_rotation_pair_zero() {
        let th = 0.6_f64;
        let rot = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let c_ij = fmap(rot.clone(), DMatrix::identity(1, 1));
        let c_ji = fmap(rot.transpose(), DMatrix::identity(1, 1));
        let (b, o) = structural_loss(&c_ij, &c_ji).unwrap();
        assert!(b < 1e-24);
        assert!(o < 1e-24);
    }

    #[test]
    fn structural_scaled_identity_hand_values() {
        // C_ij = 2I (k=3), C_ji = I: bij = 2 * 3 * (2-1)^2 = 6, orth = 27
        let c_ij = fmap(DMatrix::identity(3, 3) * 2.0, DMatrix::zeros(0, 0));
        let c_ji = fmap(DMatrix::identity(3, 3), DMatrix::zeros(0, 0));
        let (b, o) = structural_loss(&c_ij, &c_ji).unwrap();
        assert!((b - 6.0).abs() < 1e-12);
        assert!((o - 27.0).abs() < 1e-12);
    }

    #[test]
    fn coupling_identity_configuration_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = rand_shape(&mut rng, "s", 10, 3, 2, 4);
        let c = FunctionalMap::identity(3, 2, "s", "s");
        let pi = DMatrix::identity(10, 10);
        let loss = coupling_loss(&c, &pi, &s, &s, CouplingOrder::AsPrinted).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn coupling_first_term_zero_by_construction() {
        // C's smoothness block built exactly from Pi kills the first term;
        // probe it by zeroing the deformation family (k_el = 0)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s_i = rand_shape(&mut rng, "i", 9, 3, 0, 4);
        let s_j = rand_shape(&mut rng, "j", 7, 3, 0, 4);
        let pi_ji = rand_mat(&mut rng, 7, 9).map(|v| v.abs());
        let x = pseudoinverse(&s_j.phi).unwrap() * &pi_ji * &s_i.phi;
        let c = fmap(x, DMatrix::zeros(0, 0));
        let loss = coupling_loss(&c, &pi_ji, &s_i, &s_j, CouplingOrder::AsPrinted).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn coupling_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s_i = rand_shape(&mut rng, "i", 8, 2, 2, 3);
        let mut s_j = rand_shape(&mut rng, "j", 6, 2, 2, 3);
        // non-trivial SPD elastic mass
        let m = rand_mat(&mut rng, 2, 2);
        s_j.elastic_mass = &m * m.transpose() + DMatrix::identity(2, 2);
        let pi_ji = rand_mat(&mut rng, 6, 8);
        let c = fmap(rand_mat(&mut rng, 2, 2), rand_mat(&mut rng, 2, 2));
        let got = coupling_loss(&c, &pi_ji, &s_i, &s_j, CouplingOrder::AsPrinted).unwrap();

        // independent recomputation, scalar loops only
        let x = pseudoinverse(&s_j.phi_lb()).unwrap() * &pi_ji * s_i.phi_lb();
        let y = pseudoinverse(&s_i.phi_elas()).unwrap() * pi_ji.transpose() * s_j.phi_elas();
        let mut expect = 0.0;
        for r in 0..2 {
            for cc in 0..2 {
                let d = c.c11[(r, cc)] - x[(r, cc)];
                expect += d * d;
            }
        }
        let d_el = &c.c22 - &y;
        // tr(D^T M D) accumulated entrywise
        let mut hs = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                for col in 0..2 {
                    hs += d_el[(a, col)] * s_j.elastic_mass[(a, b)] * d_el[(b, col)];
                }
            }
        }
        expect += hs;
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn cycle_identical_configuration_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = rand_shape(&mut rng, "s", 8, 2, 2, 3);
        let shapes = vec![s.clone(), ShapeEntry { name: "t".into(), ..s }];
        let pi = rand_mat(&mut rng, 8, 10).map(|v| v.abs());
        let pis = vec![pi.clone(), pi];
        let pairs = [(0, 1), (1, 0)];
        for variant in [CycleVariant::Frobenius, CycleVariant::Cosine] {
            let l = cycle_loss(&pis, &shapes, &pairs, variant).unwrap();
            assert!(l.abs() < 1e-12);
        }
    }

    #[test]
    fn cycle_frobenius_equals_perturbation_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = rand_shape(&mut rng, "s", 8, 2, 2, 3);
        let shapes = vec![s.clone(), ShapeEntry { name: "t".into(), ..s }];
        let pi = rand_mat(&mut rng, 8, 5).map(|v| v.abs());
        let e = rand_mat(&mut rng, 8, 5) * 0.01;
        let pis = vec![pi.clone(), &pi + &e];
        // E_j = E_i + Pi-perturbation pushed through the embedding
        let delta = universe_embedding(&pis[1], &shapes[1]) - universe_embedding(&pis[0], &shapes[0]);
        let l = cycle_loss(&pis, &shapes, &[(0, 1)], CycleVariant::Frobenius).unwrap();
        assert!((l - frob2(&delta)).abs() < 1e-12);
    }

    #[test]
    fn cycle_cosine_opposite_scalars() {
        // c = 1, d = 1 embeddings valued 1 and -1 give 1 - (-1) = 2
        let phi = DMatrix::from_element(1, 1, 1.0);
        let s1 = ShapeEntry::new("a", phi.clone(), 1, DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(0, 0)).unwrap();
        let s2 = ShapeEntry::new("b", phi, 1, DMatrix::from_element(1, 1, -1.0), DMatrix::zeros(0, 0)).unwrap();
        let pis = vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)];
        let l = cycle_loss(&pis, &[s1, s2], &[(0, 1)], CycleVariant::Cosine).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_zero_on_consistent_configuration() {
        let state = consistent_state(3, 6, 8, 2, 2, 3);
        let r = total_loss(&state, &LossWeights::default(), CycleVariant::Frobenius).unwrap();
        assert!(r.total < 1e-6, "total {}", r.total);
    }

    #[test]
    fn total_zero_weights() {
        let state = random_state(9, 3, 6, 8);
        let w = LossWeights { lambda_bij: 0.0, lambda_orth: 0.0, lambda_couple: 0.0, lambda_cycle: 0.0 };
        let r = total_loss(&state, &w, CycleVariant::Frobenius).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn total_report_invariants() {
        let state = random_state(10, 3, 6, 8);
        let w = LossWeights { lambda_bij: 2.0, lambda_orth: 0.5, lambda_couple: 1.5, lambda_cycle: 3.0 };
        for variant in [CycleVariant::Frobenius, CycleVariant::Cosine] {
            let r = total_loss(&state, &w, variant).unwrap();
            assert!(r.bij >= 0.0 && r.orth >= 0.0 && r.couple >= 0.0 && r.cycle >= 0.0);
            let spectral = w.lambda_bij * r.bij + w.lambda_orth * r.orth + w.lambda_couple * r.couple;
            assert!((r.spectral - spectral).abs() < 1e-9);
            assert!((r.total - (r.spectral + w.lambda_cycle * r.cycle)).abs() < 1e-9);
            let pair_bij: f64 = r.per_pair.iter().map(|p| p.bij).sum();
            assert!((pair_bij - r.bij).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbed_assignment_increases_total() {
        let state = consistent_state(3, 6, 8, 2, 2, 3);
        let base = total_loss(&state, &LossWeights::default(), CycleVariant::Frobenius)
            .unwrap()
            .total;
        let mut perturbed = state.clone();
        perturbed.logits[1][(0, 0)] = -1e4; // push vertex 0 to a new universe slot
        perturbed.logits[1][(0, 5)] = 1e4;
        perturbed.refresh_assignments().unwrap();
        let worse = total_loss(&perturbed, &LossWeights::default(), CycleVariant::Frobenius)
            .unwrap()
            .total;
        assert!(worse > base + 1e-6, "{worse} vs {base}");
    }

    #[test]
    fn gradients_vanish_at_minimum() {
        let state = consistent_state(3, 6, 8, 2, 2, 3);
        for variant in [CycleVariant::Frobenius, CycleVariant::Cosine] {
            let g = loss_gradients(&state, &LossWeights::default(), variant).unwrap();
            for (g1, g2) in g.d_c.values() {
                assert!(g1.amax() < 1e-9 && (g2.is_empty() || g2.amax() < 1e-9));
            }
            for gp in &g.d_pi {
                assert!(gp.amax() < 1e-9, "pi gradient {}", gp.amax());
            }
        }
    }

    /// Central finite differences of the total w.r.t. the soft assignments
    /// and map blocks directly (not through the normalization).
    fn fd_matches(state: &CollectionState, weights: &LossWeights, variant: CycleVariant, tol: f64) {
        let g = loss_gradients(state, weights, variant).unwrap();
        let h = 1e-6;
        // map blocks
        for (&(i, j), (g1, _)) in &g.d_c {
            for r in 0..g1.nrows() {
                for c in 0..g1.ncols() {
                    let mut plus = state.clone();
                    plus.maps.get_mut(&(i, j)).unwrap().c11[(r, c)] += h;
                    let mut minus = state.clone();
                    minus.maps.get_mut(&(i, j)).unwrap().c11[(r, c)] -= h;
                    let fd = (total_loss(&plus, weights, variant).unwrap().total
                        - total_loss(&minus, weights, variant).unwrap().total)
                        / (2.0 * h);
                    let dev = (fd - g1[(r, c)]).abs() / (g1[(r, c)].abs() + 1e-6);
                    assert!(dev < tol, "C_({i},{j})[{r},{c}]: fd {fd} vs {}", g1[(r, c)]);
                }
            }
        }
        // assignment entries
        for s in 0..state.shapes.len() {
            for v in 0..state.shapes[s].n() {
                for u in 0..state.c() {
                    let mut plus = state.clone();
                    plus.assignments[s][(v, u)] += h;
                    let mut minus = state.clone();
                    minus.assignments[s][(v, u)] -= h;
                    let fd = (total_loss(&plus, weights, variant).unwrap().total
                        - total_loss(&minus, weights, variant).unwrap().total)
                        / (2.0 * h);
                    let a = g.d_pi[s][(v, u)];
                    let dev = (fd - a).abs() / (a.abs() + 1e-6);
                    assert!(dev < tol, "Pi_{s}[{v},{u}]: fd {fd} vs {a}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [11, 12] {
            let state = random_state(seed, 3, 5, 6);
            fd_matches(&state, &LossWeights::default(), CycleVariant::Frobenius, 1e-4);
        }
        let state = random_state(13, 3, 5, 6);
        fd_matches(&state, &LossWeights::default(), CycleVariant::Cosine, 1e-4);
        let w = LossWeights { lambda_bij: 0.3, lambda_orth: 2.0, lambda_couple: 0.7, lambda_cycle: 1.3 };
        let state = random_state(14, 3, 5, 6);
        fd_matches(&state, &w, CycleVariant::Frobenius, 1e-4);
    }

    #[test]
    fn gradients_match_with_transposed_coupling() {
        let mut state = random_state(15, 3, 5, 6);
        state.coupling_order = CouplingOrder::Transposed;
        fd_matches(&state, &LossWeights::default(), CycleVariant::Frobenius, 1e-4);
    }

    #[test]
    fn finite_diff_check_quadratic_exact() {
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let grad = &x * 2.0;
        let dev = finite_diff_check(|v| v.norm_squared(), &x, &grad, 1e-5);
        assert!(dev < 1e-8, "dev {dev}");
    }

    #[test]
    fn desk_optimize_zero_loss_stays_zero() {
        let state = consistent_state(3, 5, 6, 2, 2, 3);
        let (_, trace) = desk_optimize(
            state,
            &LossWeights::default(),
            CycleVariant::Frobenius,
            5,
            0.01,
            OptimizeVars::Both,
        )
        .unwrap();
        for row in &trace {
            assert!(row.total < 1e-9, "step {} total {}", row.step, row.total);
        }
    }

    #[test]
    fn desk_optimize_zero_rate_is_identity() {
        let state = random_state(16, 3, 5, 6);
        let before = state.clone();
        let (after, trace) = desk_optimize(
            state,
            &LossWeights::default(),
            CycleVariant::Frobenius,
            3,
            0.0,
            OptimizeVars::Both,
        )
        .unwrap();
        for s in 0..before.shapes.len() {
            assert_eq!(before.logits[s], after.logits[s]);
            assert_eq!(before.assignments[s], after.assignments[s]);
        }
        for (k, m) in &before.maps {
            assert_eq!(m.c11, after.maps[k].c11);
        }
        assert!(trace.iter().all(|r| r.total == trace[0].total));
    }

    #[test]
    fn desk_optimize_descends() {
        let state = random_state(17, 3, 6, 8);
        let w = LossWeights::default();
        let (_, trace) = desk_optimize(
            state,
            &w,
            CycleVariant::Frobenius,
            40,
            0.02,
            OptimizeVars::Both,
        )
        .unwrap();
        let first = trace.first().unwrap().total;
        let last = trace.last().unwrap().total;
        assert!(last < 0.8 * first, "no descent: {first} -> {last}");
    }

    #[test]
    fn desk_optimize_monotone_on_c_only_quadratic() {
        // structural + coupling terms are quadratic in C with Pi frozen
        let state = random_state(18, 3, 5, 6);
        let w = LossWeights { lambda_cycle: 0.0, ..LossWeights::default() };
        let (_, trace) = desk_optimize(
            state,
            &w,
            CycleVariant::Frobenius,
            30,
            0.005,
            OptimizeVars::COnly,
        )
        .unwrap();
        for pair in trace.windows(2) {
            assert!(
                pair[1].total <= pair[0].total * (1.0 + 1e-12) + 1e-12,
                "increase at step {}: {} -> {}",
                pair[1].step,
                pair[0].total,
                pair[1].total
            );
        }
    }

    #[test]
    fn missing_reverse_map_is_reported() {
        let mut state = random_state(19, 2, 6, 8);
        state.maps.remove(&(1, 0));
        assert!(matches!(
            total_loss(&state, &LossWeights::default(), CycleVariant::Frobenius),
            Err(Error::MissingMap(..))
        ));
    }
}
