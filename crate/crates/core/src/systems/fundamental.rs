//! Declarative pieces of the weighted fundamental-matrix fit.
//!
//! The 8-point forward is two nested argmins, and each gets its own node:
//!
//! 1. `F0 = argmin_{||F||^2 = 1} (1/N) sum_i w_i (qt_i^T F q_i)^2`
//!    ([`AlgebraicObjective`] with [`UnitNorm`]),
//! 2. `F = argmin_{det F = 0, ||F||^2 = 1} ||F - F0||^2`
//!    ([`ProjectionObjective`] with [`DetAndNorm`]), which is the rank-2
//!    truncation of `F0` rescaled to unit norm.

use nalgebra::DVector;

use crate::geometry::{cofactor, vec_to_mat3, Match};
use crate::ift::{EqualityConstraints, LowLevelObjective};
use crate::numerics::Matrix;
use crate::systems::losses::FrobeniusToGt;

/// `(1/N) sum_i w_i (qt_i^T F q_i)^2` with parameters `w`.
#[derive(Debug, Clone)]
pub struct AlgebraicObjective {
    rows: Vec<DVector<f64>>,
}

impl AlgebraicObjective {
    pub fn new(matches: &[Match]) -> Self {
        Self { rows: matches.iter().map(|m| DVector::from_row_slice(&m.design_row())).collect() }
    }

    fn scale(&self) -> f64 {
        2.0 / self.rows.len() as f64
    }
}

impl LowLevelObjective for AlgebraicObjective {
    fn n_y(&self) -> usize {
        9
    }
    fn n_w(&self) -> usize {
        self.rows.len()
    }

    fn value(&self, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let n = self.rows.len() as f64;
        self.rows.iter().zip(w.iter()).map(|(a, wi)| wi * a.dot(y).powi(2)).sum::<f64>() / n
    }

    fn grad_y(&self, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(9);
        for (a, wi) in self.rows.iter().zip(w.iter()) {
            g += a * (wi * a.dot(y));
        }
        g * self.scale()
    }

    fn hess_yy(&self, _y: &DVector<f64>, w: &DVector<f64>) -> Matrix {
        let mut h = Matrix::zeros(9, 9);
        for (a, wi) in self.rows.iter().zip(w.iter()) {
            h += a * a.transpose() * *wi;
        }
        h * self.scale()
    }

    fn hess_yw(&self, y: &DVector<f64>, _w: &DVector<f64>) -> Matrix {
        let mut h = Matrix::zeros(9, self.rows.len());
        for (i, a) in self.rows.iter().enumerate() {
            h.set_column(i, &(a * (self.scale() * a.dot(y))));
        }
        h
    }
}

/// `||F - F0||^2` with the nine entries of `F0` as parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectionObjective;

impl LowLevelObjective for ProjectionObjective {
    fn n_y(&self) -> usize {
        9
    }
    fn n_w(&self) -> usize {
        9
    }
    fn value(&self, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
        (y - w).norm_squared()
    }
    fn grad_y(&self, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        (y - w) * 2.0
    }
    fn hess_yy(&self, _y: &DVector<f64>, _w: &DVector<f64>) -> Matrix {
        Matrix::identity(9, 9) * 2.0
    }
    fn hess_yw(&self, _y: &DVector<f64>, _w: &DVector<f64>) -> Matrix {
        Matrix::identity(9, 9) * -2.0
    }
}

/// `||F||^2 - 1`
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitNorm;

impl EqualityConstraints for UnitNorm {
    fn n_y(&self) -> usize {
        9
    }
    fn n_h(&self) -> usize {
        1
    }
    fn value(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, y.norm_squared() - 1.0)
    }
    fn jacobian(&self, y: &DVector<f64>) -> Matrix {
        Matrix::from_row_slice(1, 9, (y * 2.0).as_slice())
    }
    fn hessians(&self, _y: &DVector<f64>) -> Vec<Matrix> {
        vec![Matrix::identity(9, 9) * 2.0]
    }
}

/// `[det F, ||F||^2 - 1]`
#[derive(Debug, Clone, Copy, Default)]
pub struct DetAndNorm;

/// Levi-Civita symbol on `{0, 1, 2}`.
fn levi_civita(i: usize, j: usize, k: usize) -> f64 {
    match (i, j, k) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

impl EqualityConstraints for DetAndNorm {
    fn n_y(&self) -> usize {
        9
    }
    fn n_h(&self) -> usize {
        2
    }

    fn value(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![vec_to_mat3(y.as_slice()).determinant(), y.norm_squared() - 1.0])
    }

    fn jacobian(&self, y: &DVector<f64>) -> Matrix {
        let cof = cofactor(&vec_to_mat3(y.as_slice()));
        let mut jac = Matrix::zeros(2, 9);
        for a in 0..3 {
            for b in 0..3 {
                jac[(0, 3 * a + b)] = cof[(a, b)];
                jac[(1, 3 * a + b)] = 2.0 * y[3 * a + b];
            }
        }
        jac
    }

    fn hessians(&self, y: &DVector<f64>) -> Vec<Matrix> {
        let mut det_h = Matrix::zeros(9, 9);
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    for d in 0..3 {
                        let mut v = 0.0;
                        for e in 0..3 {
                            for f in 0..3 {
                                v += levi_civita(a, c, e) * levi_civita(b, d, f) * y[3 * e + f];
                            }
                        }
                        det_h[(3 * a + b, 3 * c + d)] = v;
                    }
                }
            }
        }
        vec![det_h, Matrix::identity(9, 9) * 2.0]
    }
}

/// Low-level loss, constraints and upper loss of the fundamental toy.
#[derive(Debug, Clone)]
pub struct FundamentalLosses {
    pub objective: AlgebraicObjective,
    pub constraints: DetAndNorm,
    pub upper: FrobeniusToGt,
}

pub fn fundamental_losses(matches: &[Match], f_true: &nalgebra::Matrix3<f64>) -> FundamentalLosses {
    FundamentalLosses {
        objective: AlgebraicObjective::new(matches),
        constraints: DetAndNorm,
        upper: FrobeniusToGt::new(*f_true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mat3_to_vec;
    use crate::ift::{central_jacobian, max_rel_entry_error};
    use crate::systems::losses::UpperLoss;
    use nalgebra::{Matrix3, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_constraints<H: EqualityConstraints>(h: &H, y: &DVector<f64>) {
        let j_fd = central_jacobian(|yy| h.value(yy), y, 1e-6);
        assert!(max_rel_entry_error(&h.jacobian(y), &j_fd) < 1e-5);
        for (k, hess) in h.hessians(y).iter().enumerate() {
            let fd = central_jacobian(|yy| h.jacobian(yy).row(k).transpose(), y, 1e-6);
            assert!(max_rel_entry_error(hess, &fd) < 1e-5);
        }
    }

    fn check_objective<F: LowLevelObjective>(f: &F, y: &DVector<f64>, w: &DVector<f64>) {
        let g_fd = central_jacobian(|yy| DVector::from_element(1, f.value(yy, w)), y, 1e-6);
        assert!(max_rel_entry_error(&Matrix::from_row_slice(1, 9, f.grad_y(y, w).as_slice()), &g_fd) < 1e-5);
        let h_fd = central_jacobian(|yy| f.grad_y(yy, w), y, 1e-6);
        assert!(max_rel_entry_error(&f.hess_yy(y, w), &h_fd) < 1e-5);
        let hw_fd = central_jacobian(|ww| f.grad_y(y, ww), w, 1e-6);
        assert!(max_rel_entry_error(&f.hess_yw(y, w), &hw_fd) < 1e-5);
    }

    #[test]
    fn derivatives_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let matches: Vec<Match> = (0..10)
                .map(|_| {
                    Match::new(
                        Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                        Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    )
                })
                .collect();
            let y = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let w = DVector::from_fn(10, |_, _| rng.random_range(0.0..1.0));
            check_objective(&AlgebraicObjective::new(&matches), &y, &w);
            let f0 = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            check_objective(&ProjectionObjective, &y, &f0);
            check_constraints(&UnitNorm, &y);
            check_constraints(&DetAndNorm, &y);
        }
    }

    #[test]
    fn constraint_values() {
        let f = Matrix3::new(0.0, -0.3, 0.2, 0.3, 0.0, -0.9, -0.2, 0.9, 0.0);
        let f = f / f.norm();
        assert!(DetAndNorm.value(&mat3_to_vec(&f)).amax() < 1e-10);
        let jac = DetAndNorm.jacobian(&mat3_to_vec(&Matrix3::identity()));
        let expected = mat3_to_vec(&Matrix3::identity());
        assert_eq!(jac.row(0).transpose(), expected);
    }

    #[test]
    fn frobenius_upper_vanishes_at_truth() {
        let f_true = Matrix3::from_fn(|r, c| (r as f64 - c as f64) * 0.3 + 0.1);
        let losses = fundamental_losses(&[Match::new(Vector2::zeros(), Vector2::zeros())], &f_true);
        assert_eq!(losses.upper.value(&f_true), 0.0);
    }
}
