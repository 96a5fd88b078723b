//! Weighted Kabsch rotation `argmin_R sum_i w_i ||R p_i - q_i||^2` over SO(3).

use nalgebra::{DVector, Matrix3, Vector3};

use crate::numerics;
use crate::solvers::{Result, SolverError};

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationInstance {
    pub p: Vec<Vector3<f64>>,
    pub q: Vec<Vector3<f64>>,
    pub w: DVector<f64>,
    pub r_true: Matrix3<f64>,
}

impl RegistrationInstance {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn with_weights(&self, w: DVector<f64>) -> Self {
        Self { w, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        let n = self.p.len();
        if n < 3 || self.q.len() != n || self.w.len() != n {
            return Err(SolverError::DegenerateConfiguration(format!(
                "need N >= 3 matching points and weights, got {} / {} / {}",
                n,
                self.q.len(),
                self.w.len()
            )));
        }
        if self.w.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(SolverError::DegenerateConfiguration("weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// SVD pieces of the weighted cross-covariance `H = sum_i w_i p_i q_i^T = U S V^T`
/// and the resulting rotation `R = V diag(1, 1, d) U^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KabschDecomposition {
    pub h: Matrix3<f64>,
    pub u: Matrix3<f64>,
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
    pub d: f64,
    pub r: Matrix3<f64>,
}

pub fn cross_covariance(inst: &RegistrationInstance) -> Matrix3<f64> {
    inst.p
        .iter()
        .zip(&inst.q)
        .zip(inst.w.iter())
        .fold(Matrix3::zeros(), |h, ((p, q), w)| h + p * q.transpose() * *w)
}

pub fn kabsch_decomposition(inst: &RegistrationInstance) -> Result<KabschDecomposition> {
    inst.validate()?;
    let h = cross_covariance(inst);
    if !h.iter().all(|v| v.is_finite()) {
        return Err(SolverError::DegenerateConfiguration("non-finite covariance".into()));
    }
    let (u, sigma, v) = numerics::svd3(&h)?;
    if !(sigma[1] > 1e-12 * sigma[0]) {
        return Err(SolverError::DegenerateConfiguration(format!(
            "weighted cross-covariance has rank < 2 (singular values {:e}, {:e}, {:e})",
            sigma[0], sigma[1], sigma[2]
        )));
    }
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(KabschDecomposition { h, u, sigma, v, d, r })
}

/// Weighted least-squares rotation with `R^T R = I`, `det R = 1`.
pub fn solve_kabsch(inst: &RegistrationInstance) -> Result<Matrix3<f64>> {
    kabsch_decomposition(inst).map(|k| k.r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        axis_angle(&axis, rng.random_range(0.0..3.1))
    }

    fn instance(p: Vec<Vector3<f64>>, q: Vec<Vector3<f64>>) -> RegistrationInstance {
        let n = p.len();
        RegistrationInstance { p, q, w: DVector::from_element(n, 1.0 / n as f64), r_true: Matrix3::identity() }
    }

    #[test]
    fn identity_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 6);
        let r = solve_kabsch(&instance(p.clone(), p)).unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn recovers_rotation_seed_5() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let r0 = random_rotation(&mut rng);
            let p = random_points(&mut rng, 8);
            let q = p.iter().map(|x| r0 * x).collect();
            let r = solve_kabsch(&instance(p, q)).unwrap();
            assert!((r - r0).norm() < 1e-10);
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-10);
            assert!((r.determinant() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_points(&mut rng, 7);
        let q = random_points(&mut rng, 7);
        let r = solve_kabsch(&instance(p.clone(), q.clone())).unwrap();
        let (a, b) = (random_rotation(&mut rng), random_rotation(&mut rng));
        let p2 = p.iter().map(|x| a * x).collect();
        let q2 = q.iter().map(|x| b * x).collect();
        let r2 = solve_kabsch(&instance(p2, q2)).unwrap();
        assert!((r2 - b * r * a.transpose()).norm() < 1e-9);
    }

    #[test]
    fn degenerate_covariance() {
        let p = vec![Vector3::x(), Vector3::x() * 2.0, Vector3::x() * -1.0];
        assert!(matches!(
            solve_kabsch(&instance(p.clone(), p)),
            Err(SolverError::DegenerateConfiguration(_))
        ));
        let mut inst = instance(vec![Vector3::x(); 2], vec![Vector3::x(); 2]);
        inst.w = DVector::from_element(2, 1.0);
        assert!(solve_kabsch(&inst).is_err());
    }
}
