//! Weighted rotation fit (Wahba's problem) as a declarative node: the
//! low-level loss `f(w, R) = (1/N) sum_i w_i ||R p_i - q_i||^2` and the
//! orthogonality constraints `R^T R - I = 0`.
//!
//! `R` is flattened row-major; the multipliers follow the six independent
//! upper-triangular entries of the symmetric constraint matrix.

use nalgebra::{DVector, Vector3};

use crate::geometry::vec_to_mat3;
use crate::ift::{EqualityConstraints, LowLevelObjective};
use crate::numerics::Matrix;
use crate::solvers::RegistrationInstance;
use crate::systems::losses::RotationGeodesic;

/// Upper-triangular index pairs `(j, k)` of `R^T R - I`.
pub const ORTHO_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

#[derive(Debug, Clone)]
pub struct RegistrationObjective {
    pub p: Vec<Vector3<f64>>,
    pub q: Vec<Vector3<f64>>,
}

impl RegistrationObjective {
    fn residuals(&self, y: &DVector<f64>) -> Vec<Vector3<f64>> {
        let r = vec_to_mat3(y.as_slice());
        self.p.iter().zip(&self.q).map(|(p, q)| r * p - q).collect()
    }

    fn scale(&self) -> f64 {
        2.0 / self.p.len() as f64
    }
}

impl LowLevelObjective for RegistrationObjective {
    fn n_y(&self) -> usize {
        9
    }
    fn n_w(&self) -> usize {
        self.p.len()
    }

    fn value(&self, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let n = self.p.len() as f64;
        self.residuals(y).iter().zip(w.iter()).map(|(r, wi)| wi * r.norm_squared()).sum::<f64>() / n
    }

    fn grad_y(&self, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(9);
        for ((r, p), wi) in self.residuals(y).iter().zip(&self.p).zip(w.iter()) {
            for a in 0..3 {
                for b in 0..3 {
                    g[3 * a + b] += wi * r[a] * p[b];
                }
            }
        }
        g * self.scale()
    }

    fn hess_yy(&self, _y: &DVector<f64>, w: &DVector<f64>) -> Matrix {
        let mut m = nalgebra::Matrix3::zeros();
        for (p, wi) in self.p.iter().zip(w.iter()) {
            m += p * p.transpose() * *wi;
        }
        m *= self.scale();
        let mut h = Matrix::zeros(9, 9);
        for a in 0..3 {
            h.view_mut((3 * a, 3 * a), (3, 3)).copy_from(&m);
        }
        h
    }

    fn hess_yw(&self, y: &DVector<f64>, _w: &DVector<f64>) -> Matrix {
        let mut h = Matrix::zeros(9, self.p.len());
        for (i, (r, p)) in self.residuals(y).iter().zip(&self.p).enumerate() {
            for a in 0..3 {
                for b in 0..3 {
                    h[(3 * a + b, i)] = self.scale() * r[a] * p[b];
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Orthogonality;

impl EqualityConstraints for Orthogonality {
    fn n_y(&self) -> usize {
        9
    }
    fn n_h(&self) -> usize {
        6
    }

    fn value(&self, y: &DVector<f64>) -> DVector<f64> {
        let r = vec_to_mat3(y.as_slice());
        let rtr = r.transpose() * r;
        DVector::from_iterator(
            6,
            ORTHO_PAIRS.iter().map(|&(j, k)| rtr[(j, k)] - if j == k { 1.0 } else { 0.0 }),
        )
    }

    fn jacobian(&self, y: &DVector<f64>) -> Matrix {
        let mut jac = Matrix::zeros(6, 9);
        for (c, &(j, k)) in ORTHO_PAIRS.iter().enumerate() {
            for a in 0..3 {
                jac[(c, 3 * a + j)] += y[3 * a + k];
                jac[(c, 3 * a + k)] += y[3 * a + j];
            }
        }
        jac
    }

    fn hessians(&self, _y: &DVector<f64>) -> Vec<Matrix> {
        ORTHO_PAIRS
            .iter()
            .map(|&(j, k)| {
                let mut h = Matrix::zeros(9, 9);
                for a in 0..3 {
                    h[(3 * a + j, 3 * a + k)] += 1.0;
                    h[(3 * a + k, 3 * a + j)] += 1.0;
                }
                h
            })
            .collect()
    }
}

/// Low-level loss, constraints and upper loss of the registration problem.
#[derive(Debug, Clone)]
pub struct RegistrationLosses {
    pub objective: RegistrationObjective,
    pub constraints: Orthogonality,
    pub upper: RotationGeodesic,
}

pub fn registration_losses(inst: &RegistrationInstance) -> RegistrationLosses {
    RegistrationLosses {
        objective: RegistrationObjective { p: inst.p.clone(), q: inst.q.clone() },
        constraints: Orthogonality,
        upper: RotationGeodesic { r_true: inst.r_true },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, mat3_to_vec};
    use crate::ift::{central_jacobian, max_rel_entry_error};
    use crate::solvers::solve_kabsch;
    use crate::systems::losses::UpperLoss;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> RegistrationInstance {
        let v = |rng: &mut ChaCha8Rng| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let r0 = axis_angle(&v(rng), rng.random_range(0.0..2.0));
        let p: Vec<_> = (0..n).map(|_| v(rng)).collect();
        let q = p.iter().map(|x| r0 * x + v(rng) * 0.1).collect();
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
        RegistrationInstance { p, q, w, r_true: r0 }
    }

    #[test]
    fn objective_derivatives_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let inst = random_instance(&mut rng, 5);
            let obj = registration_losses(&inst).objective;
            let y = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let w = inst.w.clone();
            let g_fd = central_jacobian(|yy| DVector::from_element(1, obj.value(yy, &w)), &y, 1e-6);
            assert!(max_rel_entry_error(&Matrix::from_row_slice(1, 9, obj.grad_y(&y, &w).as_slice()), &g_fd) < 1e-5);
            let h_fd = central_jacobian(|yy| obj.grad_y(yy, &w), &y, 1e-6);
            assert!(max_rel_entry_error(&obj.hess_yy(&y, &w), &h_fd) < 1e-5);
            let hw_fd = central_jacobian(|ww| obj.grad_y(&y, ww), &w, 1e-6);
            assert!(max_rel_entry_error(&obj.hess_yw(&y, &w), &hw_fd) < 1e-5);
        }
    }

    #[test]
    fn constraint_derivatives_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let h = Orthogonality;
        for _ in 0..100 {
            let y = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let j_fd = central_jacobian(|yy| h.value(yy), &y, 1e-6);
            assert!(max_rel_entry_error(&h.jacobian(&y), &j_fd) < 1e-5);
            for (k, hess) in h.hessians(&y).iter().enumerate() {
                let fd = central_jacobian(|yy| h.jacobian(yy).row(k).transpose(), &y, 1e-6);
                assert!(max_rel_entry_error(hess, &fd) < 1e-5);
            }
        }
        let r = axis_angle(&Vector3::new(0.1, 0.5, 1.0), 0.7);
        assert!(h.value(&mat3_to_vec(&r)).amax() < 1e-14);
    }

    #[test]
    fn kabsch_is_locally_optimal_seed_19() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let inst = random_instance(&mut rng, 6);
        let obj = registration_losses(&inst).objective;
        let r = solve_kabsch(&inst).unwrap();
        let best = obj.value(&mat3_to_vec(&r), &inst.w);
        for _ in 0..200 {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let pert = axis_angle(&axis, rng.random_range(1e-4..0.3)) * r;
            assert!(obj.value(&mat3_to_vec(&pert), &inst.w) >= best);
        }
    }

    #[test]
    fn geodesic_upper_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inst = random_instance(&mut rng, 4);
        inst.r_true = Matrix3::identity();
        let upper = registration_losses(&inst).upper;
        assert!(upper.value(&Matrix3::identity()) < 1e-7);
        let r = axis_angle(&Vector3::new(-0.3, 0.2, 0.9), 1.1);
        assert!((upper.value(&r) - 1.1).abs() < 1e-12);
    }
}
