//! Optimization of the concept rotation `Q` on the orthogonal group.
//!
//! The alignment objective is linear in `Q`:
//!
//! ```text
//! f(Q) = Σ_i [ (1/n_i) q_iᵀ S_i + Σ_{c ∈ children(i)} (1/(n_i·|children(i)|)) q_cᵀ S_i ]
//! ```
//!
//! where `S_i` is the sum of concept `i`'s whitened vectors. Ascent uses the
//! Cayley curve `Q(η) = (I + η/2·A)⁻¹ (I − η/2·A) Q` with `A = G Qᵀ − Q Gᵀ`
//! and `G = −∂f/∂Q`, which stays on the orthogonal group for every `η`.

use crate::error::{HcwError, Result};
use crate::hcw::RotationMatrix;
use crate::linalg::{solve_linear, Matrix};
use crate::tree::{ConceptId, ConceptTree};

/// Whether child-axis terms participate in the objective. `Flat` is the
/// plain concept-whitening baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hierarchy {
    Flat,
    Tree,
}

/// Whitened, spatially averaged vectors for every concept, indexed by concept id.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBatchSet {
    dim: usize,
    batches: Vec<Vec<Vec<f64>>>,
}

impl ConceptBatchSet {
    pub fn new(dim: usize, batches: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for (c, batch) in batches.iter().enumerate() {
            if batch.is_empty() {
                return Err(HcwError::validation(format!(
                    "concept {c} has an empty batch"
                )));
            }
            if let Some(v) = batch.iter().find(|v| v.len() != dim) {
                return Err(HcwError::validation(format!(
                    "concept {c} vector has length {}, expected {dim}",
                    v.len()
                )));
            }
            if batch.iter().flatten().any(|x| !x.is_finite()) {
                return Err(HcwError::numeric(format!(
                    "concept {c} batch is not finite"
                )));
            }
        }
        Ok(Self { dim, batches })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batch(&self, c: ConceptId) -> &[Vec<f64>] {
        &self.batches[c.0]
    }

    fn sum(&self, c: ConceptId) -> Vec<f64> {
        let mut s = vec![0.0; self.dim];
        for v in &self.batches[c.0] {
            for (a, b) in s.iter_mut().zip(v) {
                *a += b;
            }
        }
        s
    }

    fn check(&self, tree: &ConceptTree, dim: usize) -> Result<()> {
        if self.batches.len() != tree.len() {
            return Err(HcwError::validation(format!(
                "{} concept batches for a tree of {} concepts",
                self.batches.len(),
                tree.len()
            )));
        }
        if self.dim != dim {
            return Err(HcwError::validation(format!(
                "concept vectors are {}-dimensional, Q is {dim}x{dim}",
                self.dim
            )));
        }
        tree.bind(dim)
    }
}

/// `G` with one column per latent axis; unassigned axes are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentGradient {
    pub g: Matrix,
}

fn child_weight(tree: &ConceptTree, parent: ConceptId, n_parent: usize) -> f64 {
    1.0 / (n_parent as f64 * tree.children(parent).len() as f64)
}

pub fn alignment_objective(
    q: &RotationMatrix,
    batches: &ConceptBatchSet,
    tree: &ConceptTree,
    hierarchy: Hierarchy,
) -> Result<f64> {
    let d = q.dim();
    batches.check(tree, d)?;
    let qm = q.matrix();
    let axis_dot = |axis: usize, s: &[f64]| -> f64 { (0..d).map(|r| qm[(r, axis)] * s[r]).sum() };
    let mut total = 0.0;
    for c in tree.ids() {
        let n = batches.batch(c).len();
        let s = batches.sum(c);
        total += axis_dot(tree.axis_of(c), &s) / n as f64;
        if hierarchy == Hierarchy::Tree && !tree.is_leaf(c) {
            let wgt = child_weight(tree, c, n);
            for &child in tree.children(c) {
                total += wgt * axis_dot(tree.axis_of(child), &s);
            }
        }
    }
    Ok(total)
}

/// Negative Euclidean gradient of [`alignment_objective`] with respect to `Q`.
pub fn alignment_gradient(
    batches: &ConceptBatchSet,
    tree: &ConceptTree,
    dim: usize,
    hierarchy: Hierarchy,
) -> Result<AlignmentGradient> {
    batches.check(tree, dim)?;
    let mut g = Matrix::zeros(dim, dim);
    for c in tree.ids() {
        let n = batches.batch(c).len();
        let s = batches.sum(c);
        let axis = tree.axis_of(c);
        for r in 0..dim {
            g[(r, axis)] -= s[r] / n as f64;
        }
        if hierarchy == Hierarchy::Tree && !tree.is_leaf(c) {
            let wgt = child_weight(tree, c, n);
            for &child in tree.children(c) {
                let ca = tree.axis_of(child);
                for r in 0..dim {
                    g[(r, ca)] -= wgt * s[r];
                }
            }
        }
    }
    Ok(AlignmentGradient { g })
}

/// Skew-symmetric generator `A = G Qᵀ − Q Gᵀ`.
pub fn skew_generator(q: &RotationMatrix, g: &AlignmentGradient) -> Result<Matrix> {
    let qm = q.matrix();
    let gqt = g.g.matmul(&qm.transpose())?;
    gqt.sub(&gqt.transpose())
}

/// `Q′ = (I + η/2·A)⁻¹ (I − η/2·A) Q`.
pub fn cayley_step(q: &RotationMatrix, g: &AlignmentGradient, eta: f64) -> Result<RotationMatrix> {
    let d = q.dim();
    if g.g.rows() != d || g.g.cols() != d {
        return Err(HcwError::validation("gradient shape does not match Q"));
    }
    let a = skew_generator(q, g)?;
    cayley_from_generator(q, &a, eta)
}

fn cayley_from_generator(q: &RotationMatrix, a: &Matrix, eta: f64) -> Result<RotationMatrix> {
    let d = q.dim();
    let half = a.scale(eta / 2.0);
    let lhs = Matrix::identity(d).add(&half)?;
    let rhs = Matrix::identity(d).sub(&half)?.matmul(q.matrix())?;
    let next = solve_linear(&lhs, &rhs)?;
    if !next.is_finite() {
        return Err(HcwError::numeric("Cayley step produced non-finite entries"));
    }
    RotationMatrix::new(next)
}

/// Backtracking constants for the curvilinear search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearch {
    pub eta0: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Armijo sufficient-increase coefficient.
    pub c1: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            eta0: 1.0,
            shrink: 0.5,
            max_backtracks: 20,
            c1: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvilinearOutcome {
    pub q: RotationMatrix,
    /// Zero when no step was accepted.
    pub eta_used: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub trials: usize,
}

impl CurvilinearOutcome {
    pub fn accepted(&self) -> bool {
        self.eta_used > 0.0
    }

    pub fn objective_delta(&self) -> f64 {
        self.objective_after - self.objective_before
    }
}

/// One accepted Cayley ascent step found by Armijo backtracking over
/// `η ∈ {η₀, η₀·s, η₀·s², …}`; returns `Q` unchanged if no trial qualifies.
pub fn curvilinear_update(
    q: &RotationMatrix,
    batches: &ConceptBatchSet,
    tree: &ConceptTree,
    hierarchy: Hierarchy,
    search: &LineSearch,
) -> Result<CurvilinearOutcome> {
    let f0 = alignment_objective(q, batches, tree, hierarchy)?;
    let g = alignment_gradient(batches, tree, q.dim(), hierarchy)?;
    let a = skew_generator(q, &g)?;
    let rate = 0.5 * a.dot(&a);
    let unchanged = |trials| CurvilinearOutcome {
        q: q.clone(),
        eta_used: 0.0,
        objective_before: f0,
        objective_after: f0,
        trials,
    };
    if rate == 0.0 {
        return Ok(unchanged(0));
    }
    let mut eta = search.eta0;
    for trial in 1..=search.max_backtracks + 1 {
        if let Ok(candidate) = cayley_from_generator(q, &a, eta) {
            let f1 = alignment_objective(&candidate, batches, tree, hierarchy)?;
            if f1 >= f0 + search.c1 * eta * rate {
                return Ok(CurvilinearOutcome {
                    q: candidate,
                    eta_used: eta,
                    objective_before: f0,
                    objective_after: f1,
                    trials: trial,
                });
            }
        }
        eta *= search.shrink;
    }
    Ok(unchanged(search.max_backtracks + 1))
}
