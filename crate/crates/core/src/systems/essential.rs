//! Polynomial system satisfied by an essential matrix fitted to five matches.
//!
//! Unknowns are the nine entries of `E` (row-major); parameters are the
//! inhomogeneous coordinates of the five matches, `[q_x, q_y, qt_x, qt_y]`
//! per match. Rows: five epipolar residuals, the unit-norm row, then the nine
//! entries of `2 E E^T E - tr(E E^T) E` (row-major).

use nalgebra::{DVector, Matrix3, SMatrix};
use rand::Rng;
use thiserror::Error;

use crate::geometry::{unpack_matches, vec_to_mat3};
use crate::ift::ConstraintSystem;
use crate::numerics::{self, Matrix};

pub const N_MATCHES: usize = 5;
pub const N_EQ: usize = 15;
pub const N_PARAMS: usize = 4 * N_MATCHES;

/// Three rows of coefficients combining the nine trace-constraint rows.
pub type Combination = SMatrix<f64, 3, 9>;

#[derive(Debug, Clone, Copy, Default)]
pub struct EssentialSystem;

pub fn essential_system() -> EssentialSystem {
    EssentialSystem
}

/// `2 E E^T E - tr(E E^T) E`
pub fn trace_constraint(e: &Matrix3<f64>) -> Matrix3<f64> {
    let eet = e * e.transpose();
    eet * e * 2.0 - e * eet.trace()
}

impl ConstraintSystem for EssentialSystem {
    fn n_x(&self) -> usize {
        9
    }
    fn n_a(&self) -> usize {
        N_PARAMS
    }
    fn n_eq(&self) -> usize {
        N_EQ
    }

    fn eval(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let e = vec_to_mat3(x.as_slice());
        let mut out = DVector::zeros(N_EQ);
        for (i, m) in unpack_matches(a).iter().enumerate() {
            out[i] = m.epipolar_residual(&e);
        }
        out[5] = e.norm_squared() - 1.0;
        let t = trace_constraint(&e);
        for i in 0..3 {
            for j in 0..3 {
                out[6 + 3 * i + j] = t[(i, j)];
            }
        }
        out
    }

    fn jac_x(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix {
        let e = vec_to_mat3(x.as_slice());
        let mut jx = Matrix::zeros(N_EQ, 9);
        for (i, m) in unpack_matches(a).iter().enumerate() {
            for (k, v) in m.design_row().iter().enumerate() {
                jx[(i, k)] = *v;
            }
        }
        for k in 0..9 {
            jx[(5, k)] = 2.0 * x[k];
        }
        let ete = e.transpose() * e;
        let eet = e * e.transpose();
        let tr = eet.trace();
        let delta = |p: usize, q: usize| if p == q { 1.0 } else { 0.0 };
        for i in 0..3 {
            for j in 0..3 {
                let row = 6 + 3 * i + j;
                for p in 0..3 {
                    for q in 0..3 {
                        jx[(row, 3 * p + q)] = 2.0
                            * (delta(i, p) * ete[(q, j)] + e[(i, q)] * e[(p, j)] + eet[(i, p)] * delta(j, q))
                            - tr * delta(i, p) * delta(j, q)
                            - 2.0 * e[(p, q)] * e[(i, j)];
                    }
                }
            }
        }
        jx
    }

    fn jac_a(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix {
        let e = vec_to_mat3(x.as_slice());
        let mut ja = Matrix::zeros(N_EQ, N_PARAMS);
        for (i, m) in unpack_matches(a).iter().enumerate() {
            let et_qt = e.transpose() * m.qt_h();
            let e_q = e * m.q_h();
            ja[(i, 4 * i)] = et_qt[0];
            ja[(i, 4 * i + 1)] = et_qt[1];
            ja[(i, 4 * i + 2)] = e_q[0];
            ja[(i, 4 * i + 3)] = e_q[1];
        }
        ja
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReductionError {
    #[error("reduced jacobian stayed rank deficient (rank {rank}) after {attempts} attempts")]
    RankDeficient { rank: usize, attempts: usize },
    #[error("expected a 15-row jacobian, got {0} rows")]
    WrongShape(usize),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}

/// Square `9 x 9` Jacobian built from the epipolar rows, the norm row and
/// three linear combinations of the trace rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedJacobian {
    pub jx: Matrix,
    pub combination: Combination,
    pub rank: usize,
    pub attempts: usize,
}

/// Applies the reduction to any 15-row matrix (`jac_x` or `jac_a`).
pub fn apply_reduction(full: &Matrix, combination: &Combination) -> Matrix {
    let cols = full.ncols();
    let mut out = Matrix::zeros(9, cols);
    out.rows_mut(0, 6).copy_from(&full.rows(0, 6));
    let trace_rows = full.rows(6, 9);
    for r in 0..3 {
        for c in 0..cols {
            out[(6 + r, c)] = (0..9).map(|k| combination[(r, k)] * trace_rows[(k, c)]).sum();
        }
    }
    out
}

/// Reduces the `15 x 9` Jacobian to a square one, drawing combination
/// coefficients uniformly from `[-1, 1]` and retrying until the result has
/// full numerical rank.
pub fn reduce_essential_jacobian<R: Rng + ?Sized>(
    jx: &Matrix,
    rng: &mut R,
    max_retries: usize,
) -> Result<ReducedJacobian, ReductionError> {
    reduce_essential_jacobian_with(jx, max_retries, || {
        Combination::from_fn(|_, _| rng.random_range(-1.0..=1.0))
    })
}

/// Same as [`reduce_essential_jacobian`] with an explicit coefficient source.
/// `max_retries` counts total attempts (at least one is always made).
pub fn reduce_essential_jacobian_with(
    jx: &Matrix,
    max_retries: usize,
    mut draw: impl FnMut() -> Combination,
) -> Result<ReducedJacobian, ReductionError> {
    if jx.nrows() != N_EQ {
        return Err(ReductionError::WrongShape(jx.nrows()));
    }
    let attempts = max_retries.max(1);
    let mut last_rank = 0;
    for attempt in 1..=attempts {
        let combination = draw();
        let reduced = apply_reduction(jx, &combination);
        let rank = numerics::numerical_rank(&reduced, None)?;
        if rank == 9 {
            return Ok(ReducedJacobian { jx: reduced, combination, rank, attempts: attempt });
        }
        last_rank = rank;
    }
    Err(ReductionError::RankDeficient { rank: last_rank, attempts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mat3_to_vec, pack_matches, skew, Match};
    use crate::ift::self_check_system;
    use nalgebra::{Vector2, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn canonical_instance() -> (DVector<f64>, DVector<f64>) {
        // E = diag(1,1,0)/sqrt(2) is [t]x R for t = z, R = rotation by -90 deg
        // about z; choose matches on its variety: qt_x q_x + qt_y q_y = 0.
        let e = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) / 2f64.sqrt();
        let matches: Vec<Match> = [(0.3, -0.2, 0.5), (-0.7, 0.4, 1.0), (0.1, 0.9, -0.3), (1.2, 0.5, 0.2), (-0.4, -0.6, 0.8)]
            .iter()
            .map(|&(x, y, s)| Match::new(Vector2::new(x, y), Vector2::new(-y * s, x * s)))
            .collect();
        (mat3_to_vec(&e), pack_matches(&matches))
    }

    #[test]
    fn canonical_essential_is_a_root() {
        let (x, a) = canonical_instance();
        assert!(EssentialSystem.eval(&x, &a).amax() < 1e-12);
    }

    #[test]
    fn norm_row_vanishes_at_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let e = e / e.norm();
        let (_, a) = canonical_instance();
        assert!(EssentialSystem.eval(&mat3_to_vec(&e), &a)[5].abs() < 1e-15);
    }

    #[test]
    fn trace_constraint_holds_for_essential() {
        let t = Vector3::new(0.3, -0.5, 0.8);
        let r = crate::geometry::axis_angle(&Vector3::new(0.1, 1.0, 0.2), 0.4);
        let e = skew(&t) * r;
        assert!(trace_constraint(&e).norm() < 1e-14);
    }

    #[test]
    fn self_check_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let x = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let a = DVector::from_fn(N_PARAMS, |_, _| rng.random_range(-1.0..1.0));
            let c = self_check_system(&EssentialSystem, &x, &a);
            assert!(c.max_err() < 1e-5, "{c:?}");
        }
    }

    #[test]
    fn reduction_full_rank_at_canonical_root() {
        let (x, a) = canonical_instance();
        let jx = EssentialSystem.jac_x(&x, &a);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let red = reduce_essential_jacobian(&jx, &mut rng, 5).unwrap();
        assert_eq!(red.rank, 9);
        assert_eq!(red.attempts, 1);
    }

    #[test]
    fn zero_combination_triggers_retry() {
        let (x, a) = canonical_instance();
        let jx = EssentialSystem.jac_x(&x, &a);
        let zero = apply_reduction(&jx, &Combination::zeros());
        assert!(numerics::numerical_rank(&zero, None).unwrap() <= 6);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut calls = 0;
        let red = reduce_essential_jacobian_with(&jx, 5, || {
            calls += 1;
            if calls == 1 {
                Combination::zeros()
            } else {
                Combination::from_fn(|_, _| rng.random_range(-1.0..=1.0))
            }
        })
        .unwrap();
        assert_eq!(red.attempts, 2);
    }

    #[test]
    fn identical_rows_trigger_retry() {
        let (x, a) = canonical_instance();
        let jx = EssentialSystem.jac_x(&x, &a);
        let row = SMatrix::<f64, 1, 9>::from_fn(|_, k| 0.1 * k as f64 - 0.3);
        let same = Combination::from_rows(&[row, row, row]);
        assert!(numerics::numerical_rank(&apply_reduction(&jx, &same), None).unwrap() <= 7);
        match reduce_essential_jacobian_with(&jx, 3, || same) {
            Err(ReductionError::RankDeficient { rank, attempts }) => {
                assert!(rank <= 7);
                assert_eq!(attempts, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
