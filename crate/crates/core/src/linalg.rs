//! Dense linear-algebra helpers shared by the calibration and solver
//! modules. Everything reduces to complex Hermitian eigendecompositions;
//! SVD-like factorizations go through the Gram matrix of the short side.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Result, StmError};

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending,
/// eigenvector columns in matching order.
pub fn hermitian_eig(m: &DMatrix<Complex64>) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(StmError::invariant("hermitian_eig needs a square matrix"));
    }
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StmError::numeric("eigensolver produced non-finite values"));
    }
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Eigenvalues only, ascending.
pub fn hermitian_eigenvalues(m: &DMatrix<Complex64>) -> Vec<f64> {
    let mut vals: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Top `r` right singular vectors of a wide matrix `y` (s x n, s << n),
/// computed from the eigendecomposition of `y y^H`. Returns all singular
/// values (descending) and the n x r matrix of right singular vectors.
pub fn top_right_singular(
    y: &DMatrix<Complex64>,
    r: usize,
) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let s = y.nrows();
    let gram = y * y.adjoint();
    let (vals, vecs) = hermitian_eig(&gram)?;
    let singulars: Vec<f64> = vals.iter().rev().map(|v| v.max(0.0).sqrt()).collect();
    let r = r.min(s);
    let mut v = DMatrix::zeros(y.ncols(), r);
    for j in 0..r {
        let sigma = singulars[j];
        if sigma <= 0.0 {
            return Err(StmError::numeric(
                "requested singular vector with zero singular value",
            ));
        }
        // v_j = Y^H u_j / sigma_j
        let u = vecs.column(s - 1 - j);
        let col = y.ad_mul(&u) / Complex64::new(sigma, 0.0);
        v.set_column(j, &col);
    }
    Ok((singulars, v))
}

/// `a * b` with rayon parallelism over column chunks of `b`.
pub fn par_matmul(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    assert_eq!(a.ncols(), b.nrows());
    let n = b.ncols();
    let chunk = (n / (4 * rayon::current_num_threads().max(1))).clamp(1, 256);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Vec<(usize, DMatrix<Complex64>)> = starts
        .par_iter()
        .map(|&s| {
            let w = chunk.min(n - s);
            (s, a * b.columns(s, w))
        })
        .collect();
    let mut out = DMatrix::zeros(a.nrows(), n);
    for (s, part) in parts {
        out.columns_mut(s, part.ncols()).copy_from(&part);
    }
    out
}

/// Largest principal angle (radians) between the column spans of two
/// matrices with orthonormal columns.
pub fn subspace_max_angle(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    assert_eq!(a.nrows(), b.nrows());
    let m = a.ad_mul(b); // L x L
    let gram = m.adjoint() * &m;
    let vals = hermitian_eigenvalues(&gram);
    let smin2 = vals.first().copied().unwrap_or(0.0).clamp(0.0, 1.0);
    smin2.sqrt().min(1.0).acos()
}

/// Modified Gram-Schmidt orthonormalization of the columns, in place.
/// Returns the number of numerically independent columns kept; dependent
/// columns are replaced by zeros.
pub fn mgs_orthonormalize(m: &mut DMatrix<Complex64>) -> usize {
    let (rows, cols) = m.shape();
    let mut kept = 0;
    for j in 0..cols {
        for i in 0..j {
            let qi = m.column(i).clone_owned();
            let proj = qi.dotc(&m.column(j));
            let mut cj = m.column_mut(j);
            for r in 0..rows {
                cj[r] -= proj * qi[r];
            }
        }
        let norm = m.column(j).norm();
        if norm > 1e-12 {
            let inv = Complex64::new(1.0 / norm, 0.0);
            m.column_mut(j).apply(|v| *v *= inv);
            kept += 1;
        } else {
            m.column_mut(j).fill(Complex64::default());
        }
    }
    kept
}

/// i.i.d. complex Gaussian matrix with per-entry variance `var`
/// (`E|phi|^2 = var`).
pub fn complex_gaussian(
    rows: usize,
    cols: usize,
    var: f64,
    rng: &mut impl Rng,
) -> DMatrix<Complex64> {
    let comp_std = (var / 2.0).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re * comp_std, im * comp_std)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(n: usize, rng: &mut impl Rng) -> DMatrix<Complex64> {
        let a = complex_gaussian(n, n, 1.0, rng);
        (&a + a.adjoint()) * Complex64::new(0.5, 0.0)
    }

    #[test]
    fn eig_reconstructs_and_sorts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_hermitian(12, &mut rng);
        let (vals, vecs) = hermitian_eig(&h).unwrap();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let d = DMatrix::from_fn(12, 12, |i, j| {
            if i == j {
                Complex64::new(vals[i], 0.0)
            } else {
                Complex64::default()
            }
        });
        let rec = &vecs * d * vecs.adjoint();
        assert!((rec - &h).norm() < 1e-10 * h.norm().max(1.0));
    }

    #[test]
    fn gram_based_singular_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = complex_gaussian(4, 20, 1.0, &mut rng);
        let (sv, v) = top_right_singular(&y, 4).unwrap();
        assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        // columns orthonormal
        let g = v.ad_mul(&v);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - Complex64::new(expect, 0.0)).norm() < 1e-10);
            }
        }
        // Y restricted to the span of V reproduces Y
        let resid = (&y - (&y * &v) * v.adjoint()).norm();
        assert!(resid < 1e-10 * y.norm());
    }

    #[test]
    fn par_matmul_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = complex_gaussian(17, 23, 1.0, &mut rng);
        let b = complex_gaussian(23, 31, 1.0, &mut rng);
        let c = par_matmul(&a, &b);
        assert!((&c - &a * &b).norm() < 1e-12 * c.norm());
    }

    #[test]
    fn angle_between_identical_spans_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut q = complex_gaussian(10, 3, 1.0, &mut rng);
        mgs_orthonormalize(&mut q);
        // rotate basis within the span
        let mut r = complex_gaussian(3, 3, 1.0, &mut rng);
        mgs_orthonormalize(&mut r);
        let q2 = &q * &r;
        assert!(subspace_max_angle(&q, &q2) < 1e-7);
        let mut p = complex_gaussian(10, 3, 1.0, &mut rng);
        mgs_orthonormalize(&mut p);
        assert!(subspace_max_angle(&q, &p) > 0.1);
    }
}
