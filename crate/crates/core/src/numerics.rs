//! Small dense linear algebra: full SVD with a fixed sign convention,
//! Moore–Penrose pseudoinverse, numerical rank and real eigenpairs.
//!
//! Everything here is backed by `nalgebra`; this module only pins down the
//! conventions (ordering, signs, tolerances, error reporting) that the
//! gradient code relies on for reproducible comparisons.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

/// Dense row/column matrix of reals.
pub type Matrix = DMatrix<f64>;

/// Imaginary magnitude below which an eigenvalue is treated as real.
pub const REAL_EIGENVALUE_TOL: f64 = 1e-8;

const SVD_MAX_ITERS: usize = 10_000;
/// Stopping tolerances tried in turn, as multiples of machine epsilon.
const SVD_EPS_MULTIPLIERS: [f64; 6] = [5.0, 1.0, 100.0, 2.0, 10.0, 1e4];
/// An attempt within this many `eps * max(rows, cols)` is accepted at once.
const SVD_ACCEPT_FACTOR: f64 = 100.0;
/// Largest relative reconstruction or orthogonality error ever returned.
const SVD_MAX_ERROR: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("iterative decomposition did not converge")]
    ConvergenceFailure,
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Full singular value decomposition `m = u * diag(sigma) * v^T`.
///
/// `u` is `rows x rows`, `v` is `cols x cols` and `sigma` holds the
/// `min(rows, cols)` singular values in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: DVector<f64>,
    pub v: Matrix,
}

impl SvdResult {
    /// Rebuilds `u * diag(sigma) * v^T`.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.len();
        let us = self.u.columns(0, k) * Matrix::from_diagonal(&self.sigma);
        us * self.v.columns(0, k).transpose()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.iter().copied().fold(0.0, f64::max)
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite)
    }
}

/// Full SVD with deterministic signs: the largest-magnitude entry of every
/// left singular vector is positive (ties go to the lowest index), and the
/// paired right singular vector is flipped along with it.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(SvdResult {
            u: Matrix::identity(rows, rows),
            sigma: DVector::zeros(0),
            v: Matrix::identity(cols, cols),
        });
    }

    // Thin SVD of whichever orientation is tall, then complete the short side.
    let (mut u, sigma, mut v) = if rows >= cols {
        let (u, s, v) = thin_svd(m.clone())?;
        (complete_basis(&u), s, v)
    } else {
        let (ut, s, vt) = thin_svd(m.transpose())?;
        (vt, s, complete_basis(&ut))
    };

    let k = sigma.len();
    for j in 0..u.ncols() {
        if leading_sign(u.column(j).iter().copied()) < 0.0 {
            u.column_mut(j).neg_mut();
            if j < k {
                v.column_mut(j).neg_mut();
            }
        }
    }
    for j in k..v.ncols() {
        if leading_sign(v.column(j).iter().copied()) < 0.0 {
            v.column_mut(j).neg_mut();
        }
    }
    ensure_finite(&u)?;
    ensure_finite(&v)?;
    Ok(SvdResult { u, sigma, v })
}

/// Verified SVD of a 3x3 matrix as `(u, sigma, v)`, sigma non-increasing.
pub fn svd3(m: &Matrix3<f64>) -> Result<(Matrix3<f64>, Vector3<f64>, Matrix3<f64>)> {
    let dec = svd(&Matrix::from_column_slice(3, 3, m.as_slice()))?;
    Ok((
        Matrix3::from_column_slice(dec.u.as_slice()),
        Vector3::from_column_slice(dec.sigma.as_slice()),
        Matrix3::from_column_slice(dec.v.as_slice()),
    ))
}

/// Thin SVD of a tall (or square) matrix, returning `(u, sigma, v)` with
/// `u: rows x cols`, `v: cols x cols`, sigma sorted non-increasing.
fn thin_svd(m: Matrix) -> Result<(Matrix, DVector<f64>, Matrix)> {
    let (u, s, v) = verified_svd(&m)?;
    // try_svd sorts already; keep the order explicit and stable anyway.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let sigma = DVector::from_iterator(s.len(), order.iter().map(|&i| s[i]));
    let u = Matrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v = Matrix::from_columns(&order.iter().map(|&i| v.column(i)).collect::<Vec<_>>());
    Ok((u, sigma, v))
}

/// nalgebra's bidiagonal SVD occasionally reports convergence with a wrong
/// factorisation (relative reconstruction error up to 1e-5, e.g. on repeated
/// singular values), and whether it does depends on the stopping `eps`. Each
/// attempt is therefore verified and the most accurate one is kept.
fn verified_svd(m: &Matrix) -> Result<(Matrix, DVector<f64>, Matrix)> {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let good = SVD_ACCEPT_FACTOR * f64::EPSILON * m.nrows().max(m.ncols()) as f64;
    let mt = m.transpose();
    let mut best: Option<(f64, (Matrix, DVector<f64>, Matrix))> = None;
    // Factorising the transpose runs a different bidiagonalisation, which
    // often succeeds where the original fails.
    for (transposed, mult) in SVD_EPS_MULTIPLIERS.iter().flat_map(|&e| [(false, e), (true, e)]) {
        let src = if transposed { &mt } else { m };
        let Some(dec) = src.clone().try_svd(true, true, mult * f64::EPSILON, SVD_MAX_ITERS) else { continue };
        let (Some(u), Some(v_t)) = (dec.u, dec.v_t) else { continue };
        let (u, s, v) = if transposed { (v_t.transpose(), dec.singular_values, u) } else { (u, dec.singular_values, v_t.transpose()) };
        let k = s.len();
        let recon = (&u * Matrix::from_diagonal(&s) * v.transpose() - m).norm() / scale;
        let ortho = (u.transpose() * &u - Matrix::identity(k, k)).norm() + (v.transpose() * &v - Matrix::identity(k, k)).norm();
        let err = recon.max(ortho);
        if !err.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, (u, s, v)));
        }
        if err <= good {
            break;
        }
    }
    if best.as_ref().is_none_or(|(e, _)| *e > good) {
        if let Some((u, s, v)) = jacobi_svd(m) {
            let k = s.len();
            let recon = (&u * Matrix::from_diagonal(&s) * v.transpose() - m).norm() / scale;
            let ortho = (u.transpose() * &u - Matrix::identity(k, k)).norm() + (v.transpose() * &v - Matrix::identity(k, k)).norm();
            let err = recon.max(ortho);
            if err.is_finite() && best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((err, (u, s, v)));
            }
        }
    }
    match best {
        Some((err, dec)) if err <= SVD_MAX_ERROR => Ok(dec),
        _ => Err(NumericsError::ConvergenceFailure),
    }
}

/// One-sided Jacobi SVD of a tall (or square) matrix: slow but accurate, used
/// only when the bidiagonal method fails verification.
fn jacobi_svd(m: &Matrix) -> Option<(Matrix, DVector<f64>, Matrix)> {
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut v = Matrix::identity(cols, cols);
    let tol = rows as f64 * f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, p)], mat[(r, q)]);
                        mat[(r, p)] = c * x - s * y;
                        mat[(r, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            let norms: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
            let mut order: Vec<usize> = (0..cols).collect();
            order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
            let sigma = DVector::from_iterator(cols, order.iter().map(|&i| norms[i]));
            let floor = sigma[0] * f64::EPSILON * rows as f64;
            let k = sigma.iter().filter(|&&x| x > floor).count();
            let good = Matrix::from_columns(&order[..k].iter().map(|&i| a.column(i) / norms[i]).collect::<Vec<_>>());
            let u = if k == 0 { Matrix::identity(rows, cols) } else { complete_basis(&good).columns(0, cols).into_owned() };
            let v = Matrix::from_columns(&order.iter().map(|&i| v.column(i)).collect::<Vec<_>>());
            return Some((u, sigma, v));
        }
    }
    None
}

/// Extends the orthonormal columns of `q1` (p x k) to an orthonormal basis of R^p.
fn complete_basis(q1: &Matrix) -> Matrix {
    let (p, k) = q1.shape();
    if k == p {
        return q1.clone();
    }
    let mut aug = Matrix::zeros(p, k + p);
    aug.columns_mut(0, k).copy_from(q1);
    aug.columns_mut(k, p).fill_with_identity();
    let q = aug.qr().q();
    let mut out = Matrix::zeros(p, p);
    out.columns_mut(0, k).copy_from(q1);
    out.columns_mut(k, p - k).copy_from(&q.columns(k, p - k));
    out
}

/// Sign of the largest-magnitude entry (first index wins ties).
fn leading_sign(it: impl Iterator<Item = f64>) -> f64 {
    let mut best = 0.0f64;
    for v in it {
        if v.abs() > best.abs() {
            best = v;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// `max(rows, cols) * sigma_max * eps`.
pub fn default_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * f64::EPSILON
}

/// Moore–Penrose pseudoinverse. Singular values `<= tol` are treated as zero;
/// `None` selects [`default_tolerance`].
pub fn pseudoinverse(m: &Matrix, tol: Option<f64>) -> Result<Matrix> {
    let dec = svd(m)?;
    Ok(pseudoinverse_from_svd(m.nrows(), m.ncols(), &dec, tol))
}

pub(crate) fn pseudoinverse_from_svd(
    rows: usize,
    cols: usize,
    dec: &SvdResult,
    tol: Option<f64>,
) -> Matrix {
    let tol = tol.unwrap_or_else(|| default_tolerance(rows, cols, dec.sigma_max()));
    let mut out = Matrix::zeros(cols, rows);
    for (i, &s) in dec.sigma.iter().enumerate() {
        if s > tol {
            out += dec.v.column(i) * dec.u.column(i).transpose() / s;
        }
    }
    out
}

/// Number of singular values strictly above `tol` (`None` = default tolerance).
pub fn numerical_rank(m: &Matrix, tol: Option<f64>) -> Result<usize> {
    let dec = svd(m)?;
    Ok(rank_from_svd(m.nrows(), m.ncols(), &dec, tol))
}

pub(crate) fn rank_from_svd(rows: usize, cols: usize, dec: &SvdResult, tol: Option<f64>) -> usize {
    let tol = tol.unwrap_or_else(|| default_tolerance(rows, cols, dec.sigma_max()));
    dec.sigma.iter().filter(|&&s| s > tol).count()
}

/// Solves the square system `a * x = b` by LU; `None` if `a` is singular.
pub fn solve_square(a: &Matrix, b: &Matrix) -> Option<Matrix> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return None;
    }
    a.clone().lu().solve(b).filter(|x| x.iter().all(|v| v.is_finite()))
}

/// Real eigenpairs of a square matrix, ordered by ascending eigenvalue.
///
/// Eigenvalues whose imaginary part is below [`REAL_EIGENVALUE_TOL`] are kept.
/// Each eigenvector spans the numerical null space of `m - lambda I`, has unit
/// length, and its first nonzero entry is positive.
pub fn real_eigenpairs(m: &Matrix) -> Result<Vec<(f64, DVector<f64>)>> {
    ensure_finite(m)?;
    let n = m.nrows();
    if n != m.ncols() {
        return Err(NumericsError::NotSquare { rows: n, cols: m.ncols() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let schur = m
        .clone()
        .try_schur(f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(NumericsError::ConvergenceFailure)?;
    let mut values: Vec<f64> = schur
        .complex_eigenvalues()
        .iter()
        .filter(|c| c.im.abs() < REAL_EIGENVALUE_TOL)
        .map(|c| c.re)
        .collect();
    values.sort_by(f64::total_cmp);

    let mut pairs = Vec::with_capacity(values.len());
    for lambda in values {
        let shifted = m - Matrix::identity(n, n) * lambda;
        let dec = svd(&shifted)?;
        let mut v: DVector<f64> = dec.v.column(n - 1).into_owned();
        let norm = v.norm();
        if norm == 0.0 {
            return Err(NumericsError::ConvergenceFailure);
        }
        v /= norm;
        let scale = v.amax();
        if let Some(first) = v.iter().copied().find(|x| x.abs() > 1e-12 * scale) {
            if first < 0.0 {
                v.neg_mut();
            }
        }
        pairs.push((lambda, v));
    }
    Ok(pairs)
}

/// Relative Frobenius distance `||a - b|| / max(||b||, tiny)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let denom = b.norm().max(1e-300);
    (a - b).norm() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn svd_identity() {
        let dec = svd(&Matrix::identity(3, 3)).unwrap();
        assert_eq!(dec.sigma.as_slice(), &[1.0, 1.0, 1.0]);
        assert!((dec.u.clone() - Matrix::identity(3, 3)).norm() < 1e-15);
        assert!((dec.v.clone() - Matrix::identity(3, 3)).norm() < 1e-15);
    }

    #[test]
    fn svd_diagonal_sorted() {
        let m = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let dec = svd(&m).unwrap();
        assert_eq!(dec.sigma.as_slice(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_repeated_singular_values_reconstruct() {
        for seed in 0..200 {
            let q1 = random_matrix(9, 9, seed).qr().q();
            let q2 = random_matrix(6, 6, seed + 1000).qr().q();
            let s = [2.0, 2.0, 2.0, SQRT_2, SQRT_2, SQRT_2];
            let mut d = Matrix::zeros(9, 6);
            for (i, v) in s.iter().enumerate() {
                d[(i, i)] = *v;
            }
            let m = q1 * d * q2.transpose();
            let dec = svd(&m).unwrap();
            assert!(relative_error(&dec.reconstruct(), &m) < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn jacobi_fallback_is_accurate() {
        for (rows, cols, seed) in [(9, 6, 1), (10, 10, 2), (5, 5, 3)] {
            let mut m = random_matrix(rows, cols, seed);
            // make it rank deficient by one
            let last = m.column(0) * 0.5 + m.column(1) * 2.0;
            m.set_column(cols - 1, &last);
            let (u, s, v) = jacobi_svd(&m).unwrap();
            let recon = &u * Matrix::from_diagonal(&s) * v.transpose();
            assert!(relative_error(&recon, &m) < 1e-13);
            assert!((u.transpose() * &u - Matrix::identity(cols, cols)).norm() < 1e-13);
            assert!((v.transpose() * &v - Matrix::identity(cols, cols)).norm() < 1e-13);
            assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
            assert!(s[cols - 1] < 1e-13 * s[0]);
        }
    }

    #[test]
    fn svd_random_reconstructs() {
        let m = random_matrix(9, 9, 7);
        let dec = svd(&m).unwrap();
        assert!(relative_error(&dec.reconstruct(), &m) < 1e-12);
    }

    #[test]
    fn svd_full_bases_for_wide_and_tall() {
        for (r, c) in [(5, 9), (15, 9), (9, 20), (1, 4)] {
            let m = random_matrix(r, c, (r * 31 + c) as u64);
            let dec = svd(&m).unwrap();
            assert_eq!(dec.u.shape(), (r, r));
            assert_eq!(dec.v.shape(), (c, c));
            assert!((dec.u.transpose() * &dec.u - Matrix::identity(r, r)).norm() < 1e-12);
            assert!((dec.v.transpose() * &dec.v - Matrix::identity(c, c)).norm() < 1e-12);
            assert!(relative_error(&dec.reconstruct(), &m) < 1e-12);
            // Trailing right vectors span the null space.
            for j in r.min(c)..c {
                assert!((&m * dec.v.column(j)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn svd_sign_convention() {
        let m = random_matrix(6, 4, 3);
        let dec = svd(&m).unwrap();
        for j in 0..dec.u.ncols() {
            let col = dec.u.column(j);
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert_eq!(svd(&m), Err(NumericsError::NonFinite));
    }

    #[test]
    fn pinv_examples() {
        let i3 = Matrix::identity(3, 3);
        assert!((pseudoinverse(&i3, None).unwrap() - &i3).norm() < 1e-15);

        let m = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pseudoinverse(&m, None).unwrap();
        let expected = Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        assert!((p - expected).norm() < 1e-15);

        let a = random_matrix(3, 3, 11);
        let p = pseudoinverse(&a, None).unwrap();
        assert!((&a * p - Matrix::identity(3, 3)).norm() < 1e-10);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::identity(3, 3), None).unwrap(), 3);
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let v = DVector::from_vec(vec![0.3, 0.7, -1.1]);
        assert_eq!(numerical_rank(&(&u * v.transpose()), None).unwrap(), 1);
        assert_eq!(numerical_rank(&Matrix::zeros(2, 3), None).unwrap(), 0);
    }

    #[test]
    fn eigenpairs_diagonal() {
        let m = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let pairs = real_eigenpairs(&m).unwrap();
        assert_eq!(pairs.len(), 3);
        for (k, (lambda, v)) in pairs.iter().enumerate() {
            assert!((lambda - (k as f64 + 1.0)).abs() < 1e-12);
            let mut e = DVector::zeros(3);
            e[k] = 1.0;
            assert!((v - e).norm() < 1e-12);
        }
    }

    #[test]
    fn eigenpairs_rotation_has_none() {
        let m = Matrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!(real_eigenpairs(&m).unwrap().is_empty());
    }

    #[test]
    fn eigenpairs_companion_cubic() {
        // (x-1)(x-2)(x+3) = x^3 - 7x + 6
        let m = Matrix::from_row_slice(3, 3, &[0.0, 7.0, -6.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let pairs = real_eigenpairs(&m).unwrap();
        let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        assert_eq!(values.len(), 3);
        for (got, want) in values.iter().zip([-3.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        for (lambda, v) in &pairs {
            assert!((&m * v - v * *lambda).norm() < 1e-10);
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eigenpairs_not_square() {
        assert!(matches!(
            real_eigenpairs(&Matrix::zeros(2, 3)),
            Err(NumericsError::NotSquare { .. })
        ));
    }

    #[test]
    fn solve_square_singular() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(solve_square(&a, &Matrix::identity(2, 2)).is_none());
    }
}
