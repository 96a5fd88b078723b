//! Five-point essential matrix solver (null-space, Gauss-Jordan, action matrix).
//!
//! `E = x X + y Y + z Z + W` spans the null space of the 5x9 epipolar design.
//! The determinant and the nine trace constraints give ten cubics in
//! `(x, y, z)`; eliminating the ten cubic monomials leaves a 10x10 action
//! matrix for multiplication by `x`, whose real eigenvectors carry the roots.

use nalgebra::{DVector, Matrix3};

use crate::geometry::{normalize_model, pack_matches, sign_folded_distance, vec_to_mat3, Match};
use crate::ift::ConstraintSystem;
use crate::numerics::{self, Matrix};
use crate::solvers::{ModelCandidateSet, Result, SolverError};
use crate::systems::essential::EssentialSystem;

/// Residual bound every returned candidate satisfies.
pub const CANDIDATE_TOL: f64 = 1e-6;

/// Gauss-Newton iterations spent polishing each candidate.
const POLISH_ITERS: usize = 12;

/// Exponents of the twenty monomials of degree <= 3, cubic ones first.
const MONOMIALS: [(u8, u8, u8); 20] = [
    (3, 0, 0),
    (2, 1, 0),
    (2, 0, 1),
    (1, 2, 0),
    (1, 1, 1),
    (1, 0, 2),
    (0, 3, 0),
    (0, 2, 1),
    (0, 1, 2),
    (0, 0, 3),
    (2, 0, 0),
    (1, 1, 0),
    (1, 0, 1),
    (0, 2, 0),
    (0, 1, 1),
    (0, 0, 2),
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (0, 0, 0),
];

fn monomial_index(e: (u8, u8, u8)) -> usize {
    MONOMIALS.iter().position(|&m| m == e).expect("degree <= 3")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Poly([f64; 20]);

impl Poly {
    fn zero() -> Self {
        Poly([0.0; 20])
    }

    fn linear(x: f64, y: f64, z: f64, c: f64) -> Self {
        let mut p = Self::zero();
        p.0[16] = x;
        p.0[17] = y;
        p.0[18] = z;
        p.0[19] = c;
        p
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (i, a) in self.0.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (j, b) in other.0.iter().enumerate() {
                if *b == 0.0 {
                    continue;
                }
                let (ei, ej) = (MONOMIALS[i], MONOMIALS[j]);
                out.0[monomial_index((ei.0 + ej.0, ei.1 + ej.1, ei.2 + ej.2))] += a * b;
            }
        }
        out
    }

    fn add(&self, other: &Poly) -> Poly {
        let mut out = *self;
        for (o, b) in out.0.iter_mut().zip(other.0.iter()) {
            *o += b;
        }
        out
    }

    fn scale(&self, s: f64) -> Poly {
        Poly(self.0.map(|v| v * s))
    }
}

type PolyMat = [[Poly; 3]; 3];

fn pm_mul(a: &PolyMat, b: &PolyMat) -> PolyMat {
    let mut out = [[Poly::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for k in 0..3 {
                *cell = cell.add(&a[i][k].mul(&b[k][j]));
            }
        }
    }
    out
}

fn pm_transpose(a: &PolyMat) -> PolyMat {
    let mut out = *a;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[j][i];
        }
    }
    out
}

/// The 10x20 coefficient matrix of `det E` and `2 E E^T E - tr(E E^T) E`.
fn constraint_coefficients(basis: &[Matrix3<f64>; 4]) -> Matrix {
    let [x, y, z, w] = basis;
    let mut e = [[Poly::zero(); 3]; 3];
    for (i, row) in e.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = Poly::linear(x[(i, j)], y[(i, j)], z[(i, j)], w[(i, j)]);
        }
    }
    let eet = pm_mul(&e, &pm_transpose(&e));
    let eete = pm_mul(&eet, &e);
    let trace = eet[0][0].add(&eet[1][1]).add(&eet[2][2]);

    let mut rows = Vec::with_capacity(10);
    let det = e[0][0]
        .mul(&e[1][1].mul(&e[2][2]).add(&e[1][2].mul(&e[2][1]).scale(-1.0)))
        .add(&e[0][1].mul(&e[1][2].mul(&e[2][0]).add(&e[1][0].mul(&e[2][2]).scale(-1.0))))
        .add(&e[0][2].mul(&e[1][0].mul(&e[2][1]).add(&e[1][1].mul(&e[2][0]).scale(-1.0))));
    rows.push(det);
    for i in 0..3 {
        for j in 0..3 {
            rows.push(eete[i][j].scale(2.0).add(&trace.mul(&e[i][j]).scale(-1.0)));
        }
    }
    Matrix::from_fn(10, 20, |r, c| rows[r].0[c])
}

/// Gauss-Newton refinement of a candidate on the full 15-equation system;
/// keeps the iterate with the smallest residual seen.
fn polish(sys: &EssentialSystem, e: &mut DVector<f64>, params: &DVector<f64>) {
    let mut best = (sys.eval(e, params).amax(), e.clone());
    let mut y = e.clone();
    for _ in 0..POLISH_ITERS {
        if best.0 < 1e-15 {
            break;
        }
        let r = sys.eval(&y, params);
        let Ok(pinv) = numerics::pseudoinverse(&sys.jac_x(&y, params), None) else { break };
        y -= pinv * r;
        let res = sys.eval(&y, params).amax();
        if !res.is_finite() {
            break;
        }
        if res < best.0 {
            best = (res, y.clone());
        }
    }
    *e = best.1;
}

/// Real essential matrices (at most 10, unit norm, sign-normalised) consistent
/// with five matches. An empty candidate set means no real solution.
pub fn solve_essential_5pt(sample: &[Match]) -> Result<ModelCandidateSet> {
    if sample.len() != 5 {
        return Err(SolverError::DegenerateConfiguration(format!("need exactly 5 matches, got {}", sample.len())));
    }
    let design = Matrix::from_fn(5, 9, |r, c| sample[r].design_row()[c]);
    let dec = numerics::svd(&design)?;
    let rank = dec.sigma.iter().filter(|&&s| s > 1e-10 * dec.sigma_max()).count();
    if rank < 5 {
        return Err(SolverError::DegenerateConfiguration(format!("5x9 design has rank {rank} < 5")));
    }
    let basis = [5, 6, 7, 8].map(|k| vec_to_mat3(dec.v.column(k).as_slice()));

    let coeffs = constraint_coefficients(&basis);
    let c1 = coeffs.columns(0, 10).into_owned();
    let c2 = coeffs.columns(10, 10).into_owned();
    let g = numerics::solve_square(&c1, &c2)
        .ok_or_else(|| SolverError::DegenerateConfiguration("cubic elimination matrix is singular".into()))?;

    // Basis b = [x^2, xy, xz, y^2, yz, z^2, x, y, z, 1]; A b = x b.
    let mut action = Matrix::zeros(10, 10);
    for r in 0..6 {
        action.set_row(r, &(-g.row(r)));
    }
    action[(6, 0)] = 1.0;
    action[(7, 1)] = 1.0;
    action[(8, 2)] = 1.0;
    action[(9, 6)] = 1.0;

    let schur = action
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or(SolverError::Numerics(numerics::NumericsError::ConvergenceFailure))?;
    let params = pack_matches(sample);
    let sys = EssentialSystem;
    let mut out: Vec<Matrix3<f64>> = Vec::new();
    for lambda in schur.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-6 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let shifted = &action - Matrix::identity(10, 10) * lambda.re;
        let ev = numerics::svd(&shifted)?;
        let b = ev.v.column(9);
        if b[9].abs() < 1e-14 * b.amax() {
            continue;
        }
        let (x, y, z) = (b[6] / b[9], b[7] / b[9], b[8] / b[9]);
        let e = basis[0] * x + basis[1] * y + basis[2] * z + basis[3];
        let norm = e.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            continue;
        }
        let mut ev = crate::geometry::mat3_to_vec(&(e / norm));
        polish(&sys, &mut ev, &params);
        if !(sys.eval(&ev, &params).amax() <= CANDIDATE_TOL) {
            continue;
        }
        let cand = normalize_model(&vec_to_mat3(ev.as_slice()));
        if out.iter().all(|c| sign_folded_distance(c, &cand) > 1e-6) {
            out.push(cand);
        }
    }
    Ok(ModelCandidateSet::new(out))
}
