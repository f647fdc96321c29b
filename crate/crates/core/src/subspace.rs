//! Feasible-update subspaces.
//!
//! The walk moves inside the intersection of (a) the span of alive
//! coordinates, (b) the nullspace of a list of linear constraints, and
//! (c) a spectral subspace on which a drift quadratic form is dominated
//! by a diagonal one. (c) is built the only constructive way available:
//! whiten by the diagonal, eigendecompose, and keep the eigenvectors at
//! or below the threshold `alpha^2 / beta`. Every dropped eigenvector
//! becomes one more linear constraint, so the three pieces compose into
//! a single nullspace computation.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, gs_push, rank_drop_tol, sym_eigen};

/// Homogeneous linear constraints: coordinates pinned to zero plus
/// vectors the solution must be orthogonal to. Duplicate or dependent
/// vectors are fine; the basis routine drops them.
#[derive(Debug, Clone, Default)]
pub struct LinearConstraintSet {
    pub n: usize,
    pub frozen: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
}

impl LinearConstraintSet {
    pub fn new(n: usize) -> Self {
        LinearConstraintSet { n, frozen: Vec::new(), vectors: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct OrthonormalBasis {
    pub n: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl OrthonormalBasis {
    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn full(n: usize) -> Self {
        let mut vectors = Vec::with_capacity(n);
        for j in 0..n {
            let mut v = vec![0.0; n];
            v[j] = 1.0;
            vectors.push(v);
        }
        OrthonormalBasis { n, vectors }
    }
}

/// Orthonormal basis of the set of vectors vanishing on the frozen
/// coordinates and orthogonal to every constraint vector.
///
/// Deterministic: constraints are orthonormalized in the order given,
/// then the basis is grown from coordinate seeds in ascending index order.
pub fn nullspace_basis(constraints: &LinearConstraintSet) -> OrthonormalBasis {
    let n = constraints.n;
    let tol = rank_drop_tol(n);
    let mut free = vec![true; n];
    for &j in &constraints.frozen {
        free[j] = false;
    }
    // Constraint block Q, restricted to free coordinates.
    let mut q_flat: Vec<f64> = Vec::new();
    let mut q_rows = 0usize;
    for c in &constraints.vectors {
        assert_eq!(c.len(), n, "constraint length mismatch");
        let mut restricted: Vec<f64> = c.clone();
        for (j, v) in restricted.iter_mut().enumerate() {
            if !free[j] {
                *v = 0.0;
            }
        }
        let scale = restricted.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if scale == 0.0 {
            continue;
        }
        gs_push(&mut q_flat, &mut q_rows, n, &restricted, tol * scale.max(1.0));
    }
    // Extend with coordinate seeds; the survivors are the nullspace basis.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut all_flat = q_flat;
    let mut all_rows = q_rows;
    let mut seed = vec![0.0f64; n];
    for j in 0..n {
        if !free[j] {
            continue;
        }
        seed[j] = 1.0;
        if gs_push(&mut all_flat, &mut all_rows, n, &seed, tol) {
            basis.push(all_flat[(all_rows - 1) * n..all_rows * n].to_vec());
        }
        seed[j] = 0.0;
    }
    OrthonormalBasis { n, vectors: basis }
}

/// Matrices of a drift/diagonal quadratic-form pair. `g` and `h` are
/// row-major with `n` columns; `k_diag` is the diagonal of `h^T h`.
#[derive(Debug, Clone)]
pub struct QuadraticFormPair {
    pub g: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub k_diag: Vec<f64>,
    pub n: usize,
}

impl QuadraticFormPair {
    pub fn new(g: Vec<Vec<f64>>, h: Vec<Vec<f64>>) -> Self {
        assert_eq!(g.len(), h.len(), "row count mismatch");
        let n = g.first().map_or(0, |r| r.len());
        let mut k_diag = vec![0.0f64; n];
        for row in &h {
            assert_eq!(row.len(), n);
            for (j, &v) in row.iter().enumerate() {
                k_diag[j] += v * v;
            }
        }
        for row in &g {
            assert_eq!(row.len(), n);
        }
        QuadraticFormPair { g, h, k_diag, n }
    }

    /// Largest ratio |G_ij| / |H_ij| over nonzero entries; infinite if G
    /// has a nonzero where H is zero.
    pub fn domination_ratio(&self) -> f64 {
        let mut worst = 0.0f64;
        for (gr, hr) in self.g.iter().zip(&self.h) {
            for (&gij, &hij) in gr.iter().zip(hr) {
                if gij == 0.0 {
                    continue;
                }
                if hij == 0.0 {
                    return f64::INFINITY;
                }
                worst = worst.max(gij.abs() / hij.abs());
            }
        }
        worst
    }

    pub fn quad_g(&self, w: &[f64]) -> f64 {
        self.g.iter().map(|r| dot(r, w).powi(2)).sum()
    }

    pub fn quad_k(&self, w: &[f64]) -> f64 {
        self.k_diag.iter().zip(w).map(|(&k, &wi)| k * wi * wi).sum()
    }
}

/// Eigenvectors of the whitened operator with eigenvalue above the
/// threshold, returned as linear constraint vectors `K^(1/2) u`.
/// Coordinates with (numerically) zero diagonal pass through without
/// constraining anything.
pub fn threshold_violating_directions(
    g: &[Vec<f64>],
    k_diag: &[f64],
    threshold: f64,
) -> Vec<Vec<f64>> {
    let n = k_diag.len();
    let r = g.len();
    let k_tol = k_diag.iter().fold(0.0f64, |a, &b| a.max(b)) * 1e-14;
    let cols: Vec<usize> = (0..n).filter(|&j| k_diag[j] > k_tol).collect();
    if cols.is_empty() || r == 0 {
        return Vec::new();
    }
    let p = cols.len();
    let inv_sqrt: Vec<f64> = cols.iter().map(|&j| 1.0 / k_diag[j].sqrt()).collect();
    // M has entries G_ij / sqrt(K_jj) on the kept columns.
    let mut m = vec![0.0f64; r * p];
    for (i, row) in g.iter().enumerate() {
        for (t, &j) in cols.iter().enumerate() {
            m[i * p + t] = row[j] * inv_sqrt[t];
        }
    }
    // Exact bound: lambda_max(M^T M) <= trace = ||M||_F^2.
    let frob_sq: f64 = m.iter().map(|v| v * v).sum();
    if frob_sq <= threshold {
        return Vec::new();
    }
    // Eigendecompose on the smaller side.
    let mut dropped: Vec<(f64, Vec<f64>)> = Vec::new(); // (lambda, y in R^p)
    if p <= r {
        let mut mtm = vec![0.0f64; p * p];
        for i in 0..r {
            let row = &m[i * p..(i + 1) * p];
            for a in 0..p {
                if row[a] == 0.0 {
                    continue;
                }
                for b in a..p {
                    mtm[a * p + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                mtm[a * p + b] = mtm[b * p + a];
            }
        }
        let eig = sym_eigen(mtm, p);
        for (idx, &lam) in eig.values.iter().enumerate() {
            if lam > threshold * (1.0 + 1e-12) {
                dropped.push((lam, eig.vectors[idx * p..(idx + 1) * p].to_vec()));
            } else {
                break;
            }
        }
    } else {
        let mut mmt = vec![0.0f64; r * r];
        for a in 0..r {
            let ra = &m[a * p..(a + 1) * p];
            for b in a..r {
                mmt[a * r + b] = dot(ra, &m[b * p..(b + 1) * p]);
            }
        }
        for a in 0..r {
            for b in 0..a {
                mmt[a * r + b] = mmt[b * r + a];
            }
        }
        let eig = sym_eigen(mmt, r);
        for (idx, &lam) in eig.values.iter().enumerate() {
            if lam > threshold * (1.0 + 1e-12) {
                let u = &eig.vectors[idx * r..(idx + 1) * r];
                let mut y = vec![0.0f64; p];
                for a in 0..r {
                    if u[a] != 0.0 {
                        axpy(&mut y, u[a], &m[a * p..(a + 1) * p]);
                    }
                }
                let inv = 1.0 / lam.sqrt();
                for v in y.iter_mut() {
                    *v *= inv;
                }
                dropped.push((lam, y));
            } else {
                break;
            }
        }
    }
    // Map each dropped direction y back to the constraint K^(1/2) y.
    dropped
        .into_iter()
        .map(|(_, y)| {
            let mut c = vec![0.0f64; n];
            for (t, &j) in cols.iter().enumerate() {
                c[j] = k_diag[j].sqrt() * y[t];
            }
            c
        })
        .collect()
}

/// Subspace of `span(within)` on which `w^T G^T G w <= (alpha^2/beta) w^T K w`.
///
/// The spectral construction runs in coordinates; its violating directions
/// become constraints intersected with the given basis, which loses at
/// most `beta * n` dimensions in total.
pub fn eigen_threshold_subspace(
    pair: &QuadraticFormPair,
    within: &OrthonormalBasis,
    alpha: f64,
    beta: f64,
) -> Result<OrthonormalBasis> {
    assert!(alpha > 0.0 && beta > 0.0 && beta <= 1.0);
    if pair.n != within.n {
        return Err(Error::NumericalFailure("dimension mismatch in quadratic pair".into()));
    }
    let threshold = alpha * alpha / beta;
    let constraints = threshold_violating_directions(&pair.g, &pair.k_diag, threshold);
    if constraints.is_empty() {
        return Ok(within.clone());
    }
    Ok(intersect_with_constraints(within, &constraints))
}

/// Orthonormal basis of `{ w in span(within) : <w, c> = 0 for all c }`.
pub fn intersect_with_constraints(
    within: &OrthonormalBasis,
    constraints: &[Vec<f64>],
) -> OrthonormalBasis {
    let k = within.dim();
    let n = within.n;
    if k == 0 || constraints.is_empty() {
        return within.clone();
    }
    // Express the constraints in basis coordinates and take the nullspace there.
    let mut reduced = LinearConstraintSet::new(k);
    for c in constraints {
        reduced
            .vectors
            .push(within.vectors.iter().map(|b| dot(b, c)).collect());
    }
    let inner = nullspace_basis(&reduced);
    let mut vectors = Vec::with_capacity(inner.dim());
    for y in &inner.vectors {
        let mut v = vec![0.0f64; n];
        for (t, b) in within.vectors.iter().enumerate() {
            if y[t] != 0.0 {
                axpy(&mut v, y[t], b);
            }
        }
        vectors.push(v);
    }
    OrthonormalBasis { n, vectors }
}

/// Nullspace basis of a flat list of constraint rows via Householder QR,
/// writing orthonormal basis rows into `basis_out` (cleared first) and
/// returning the nullspace dimension.
///
/// Produces the same subspace as `nullspace_basis` on the packed problem,
/// an order of magnitude faster when the constraint count is small relative
/// to the dimension. Dependent constraints are dropped at the usual rank
/// tolerance. Deterministic.
pub fn householder_nullspace(
    constraints: &[f64],
    c_count: usize,
    dim: usize,
    basis_out: &mut Vec<f64>,
) -> usize {
    basis_out.clear();
    if dim == 0 {
        return 0;
    }
    debug_assert_eq!(constraints.len(), c_count * dim);
    let tol = rank_drop_tol(dim);
    // Reflectors: v supported on [pos..dim), stored densely with their tau.
    let mut refl: Vec<f64> = Vec::new();
    let mut taus: Vec<f64> = Vec::new();
    let mut rank = 0usize;
    let mut w = vec![0.0f64; dim];
    for c in 0..c_count {
        let row = &constraints[c * dim..(c + 1) * dim];
        let scale = row.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if scale == 0.0 {
            continue;
        }
        w.copy_from_slice(row);
        for k in 0..rank {
            let v = &refl[k * dim..(k + 1) * dim];
            let d = dot(&v[k..], &w[k..]);
            let t = taus[k];
            for j in k..dim {
                w[j] -= t * d * v[j];
            }
        }
        let resid = &w[rank..];
        let nrm = crate::linalg::norm(resid);
        if nrm <= tol * scale.max(1.0) {
            continue; // dependent constraint
        }
        // Householder vector zeroing w below `rank`.
        let alpha = if w[rank] >= 0.0 { -nrm } else { nrm };
        let mut v = vec![0.0f64; dim];
        v[rank..].copy_from_slice(&w[rank..]);
        v[rank] -= alpha;
        let vnorm_sq = dot(&v[rank..], &v[rank..]);
        if vnorm_sq == 0.0 {
            continue;
        }
        taus.push(2.0 / vnorm_sq);
        refl.extend_from_slice(&v);
        rank += 1;
        if rank == dim {
            break;
        }
    }
    // Nullspace basis: columns rank..dim of Q = H_0 H_1 ... H_{rank-1}.
    let k_out = dim - rank;
    basis_out.resize(k_out * dim, 0.0);
    for (out_idx, i) in (rank..dim).enumerate() {
        let y = &mut basis_out[out_idx * dim..(out_idx + 1) * dim];
        y[i] = 1.0;
        for k in (0..rank).rev() {
            let v = &refl[k * dim..(k + 1) * dim];
            let d = dot(&v[k..], &y[k..]);
            let t = taus[k];
            for j in k..dim {
                y[j] -= t * d * v[j];
            }
        }
    }
    k_out
}

/// Weighted rows for the direction objective: sum_i w_i <row_i, v>^2.
pub fn direction_objective(rows: &[(&[f64], f64)], v: &[f64]) -> f64 {
    rows.iter().map(|&(r, w)| w * dot(r, v).powi(2)).sum()
}

/// Basis vector minimizing the weighted quadratic objective.
/// Ties break to the lowest basis index.
pub fn choose_direction(
    basis: &OrthonormalBasis,
    rows: &[(&[f64], f64)],
) -> Result<(usize, f64)> {
    if basis.dim() == 0 {
        return Err(Error::EmptyBasis);
    }
    let mut best = (0usize, f64::INFINITY);
    for (idx, v) in basis.vectors.iter().enumerate() {
        let obj = direction_objective(rows, v);
        if obj < best.1 {
            best = (idx, obj);
        }
    }
    Ok(best)
}

/// One class of the multi-budget direction constraint.
pub struct ClassBudget<'a> {
    pub rows: Vec<(&'a [f64], f64)>,
    pub budget: f64,
}

/// First basis vector (in index order) whose objective stays within every
/// class budget. The caller guarantees existence via a Markov argument;
/// failure signals an invariant breach upstream.
pub fn choose_direction_multiclass(
    basis: &OrthonormalBasis,
    classes: &[ClassBudget<'_>],
    step: usize,
) -> Result<usize> {
    if basis.dim() == 0 {
        return Err(Error::EmptyBasis);
    }
    for (idx, v) in basis.vectors.iter().enumerate() {
        let ok = classes.iter().all(|c| {
            direction_objective(&c.rows, v) <= c.budget + 1e-12 * c.budget.abs().max(1.0)
        });
        if ok {
            return Ok(idx);
        }
    }
    Err(Error::NoFeasibleDirection { step })
}
