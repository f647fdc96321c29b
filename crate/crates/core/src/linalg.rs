//! Small dense linear algebra on `f64` slices.
//!
//! Everything here is deterministic: fixed evaluation order, no
//! parallel reductions. The walk engines call these in tight loops, so
//! the dot/axpy kernels are unrolled into independent accumulators.

/// Dot product with four accumulators so the FP adds pipeline.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// y += alpha * x
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn scale(a: &mut [f64], s: f64) {
    for v in a.iter_mut() {
        *v *= s;
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// `a` is row-major n*n and is consumed as scratch. Returns eigenvalues in
/// descending order with matching orthonormal eigenvectors (rows of the
/// returned matrix). Deterministic for a fixed input.
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Row i is the eigenvector for values[i].
    pub vectors: Vec<f64>,
    pub n: usize,
}

pub fn sym_eigen(mut a: Vec<f64>, n: usize) -> SymEigen {
    assert_eq!(a.len(), n * n);
    // v starts as identity; accumulates the rotations (column-eigvec layout).
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n > 1 {
        let off = |a: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
            s
        };
        let scale0: f64 = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
        let tol = (1e-14 * scale0) * (1e-14 * scale0) * (n * n) as f64;
        for _sweep in 0..64 {
            if off(&a) <= tol {
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= 1e-18 * scale0 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        1.0 / (theta - (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    // A <- J^T A J with J the (p,q) rotation.
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap().then(i.cmp(&j)));
    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![0.0f64; n * n];
    for (row, &idx) in order.iter().enumerate() {
        values.push(diag[idx]);
        for k in 0..n {
            vectors[row * n + k] = v[k * n + idx];
        }
    }
    SymEigen { values, vectors, n }
}

/// Stabilized modified Gram-Schmidt with re-orthogonalization.
///
/// Appends the projection of `candidate` orthogonal to all rows of `basis`
/// (flat, row-major, `dim` columns each). Returns true (and pushes the
/// normalized residual) when the residual survives the drop tolerance.
pub fn gs_push(basis: &mut Vec<f64>, rows: &mut usize, dim: usize, candidate: &[f64], drop_tol: f64) -> bool {
    debug_assert_eq!(candidate.len(), dim);
    let mut r = candidate.to_vec();
    for _pass in 0..2 {
        for i in 0..*rows {
            let q = &basis[i * dim..(i + 1) * dim];
            let c = dot(&r, q);
            axpy(&mut r, -c, q);
        }
    }
    let nrm = norm(&r);
    if nrm <= drop_tol {
        return false;
    }
    scale(&mut r, 1.0 / nrm);
    basis.extend_from_slice(&r);
    *rows += 1;
    true
}

/// Drop tolerance used for rank decisions throughout the crate.
#[inline]
pub fn rank_drop_tol(dim: usize) -> f64 {
    1e-10 * (dim.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.37 - 1.0).collect();
        let b: Vec<f64> = (0..13).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let e = sym_eigen(vec![2.0, 1.0, 1.0, 2.0], 2);
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
        let v0 = &e.vectors[0..2];
        assert!((v0[0].abs() - (0.5f64).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn jacobi_recovers_random_symmetric() {
        // Deterministic pseudo-random symmetric 8x8; check A v = lambda v.
        let n = 8;
        let mut a = vec![0.0; n * n];
        let mut s = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for i in 0..n {
            for j in i..n {
                let x = next();
                a[i * n + j] = x;
                a[j * n + i] = x;
            }
        }
        let e = sym_eigen(a.clone(), n);
        for r in 0..n {
            let v = &e.vectors[r * n..(r + 1) * n];
            for i in 0..n {
                let av: f64 = (0..n).map(|j| a[i * n + j] * v[j]).sum();
                assert!((av - e.values[r] * v[i]).abs() < 1e-9, "residual too large");
            }
        }
        // Eigenvalue sum equals trace.
        let tr: f64 = (0..n).map(|i| a[i * n + i]).sum();
        let sum: f64 = e.values.iter().sum();
        assert!((tr - sum).abs() < 1e-9);
    }

    #[test]
    fn gs_drops_dependent_vectors() {
        let dim = 3;
        let mut basis = Vec::new();
        let mut rows = 0;
        assert!(gs_push(&mut basis, &mut rows, dim, &[1.0, 0.0, 0.0], rank_drop_tol(dim)));
        assert!(gs_push(&mut basis, &mut rows, dim, &[1.0, 1.0, 0.0], rank_drop_tol(dim)));
        assert!(!gs_push(&mut basis, &mut rows, dim, &[3.0, -2.0, 0.0], rank_drop_tol(dim)));
        assert_eq!(rows, 2);
    }
}
