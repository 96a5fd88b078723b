//! Weighted registration: `dR/dw` through the orthogonality-constrained KKT
//! system and through the closed-form SVD derivatives of the Kabsch solution.

use std::time::Instant;

use nalgebra::{DVector, Matrix3};

use crate::backward::{chain, elapsed, BackwardError, GradientReport, Result, SPECTRUM_GAP};
use crate::geometry::mat3_to_vec;
use crate::ift::build_kkt;
use crate::numerics::Matrix;
use crate::solvers::{kabsch_decomposition, RegistrationInstance};
use crate::systems::registration_losses;

/// `dR/dw` (`9 x N`) from the 15x15 KKT system at the constrained optimum `r`.
pub fn registration_jacobian_kkt(r: &Matrix3<f64>, inst: &RegistrationInstance) -> Result<Matrix> {
    let losses = registration_losses(inst);
    let kkt = build_kkt(losses.objective, losses.constraints)?;
    Ok(kkt.primal_jacobian(&mat3_to_vec(r), &inst.w, None)?.dxda)
}

/// `dR/dw` (`9 x N`) by differentiating `R = V diag(1, 1, d) U^T` where
/// `H = sum_i w_i p_i q_i^T = U S V^T`.
pub fn registration_jacobian_svd(inst: &RegistrationInstance) -> Result<Matrix> {
    let k = kabsch_decomposition(inst)?;
    let s = k.sigma;
    let gap = (s[0] - s[1]).abs().min((s[1] - s[2]).abs()).min((s[0] - s[2]).abs());
    if gap < SPECTRUM_GAP * s[0].max(f64::MIN_POSITIVE) {
        return Err(BackwardError::DegenerateSpectrum { gap });
    }
    let dmat = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, k.d));
    let mut out = Matrix::zeros(9, inst.len());
    for (col, (p, q)) in inst.p.iter().zip(&inst.q).enumerate() {
        let dp = k.u.transpose() * (p * q.transpose()) * k.v;
        let mut om_u = Matrix3::zeros();
        let mut om_v = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let den = s[j] * s[j] - s[i] * s[i];
                om_u[(i, j)] = (s[j] * dp[(i, j)] + s[i] * dp[(j, i)]) / den;
                om_v[(i, j)] = (s[i] * dp[(i, j)] + s[j] * dp[(j, i)]) / den;
            }
        }
        let dr = k.v * om_v * dmat * k.u.transpose() + k.v * dmat * om_u.transpose() * k.u.transpose();
        out.set_column(col, &mat3_to_vec(&dr));
    }
    Ok(out)
}

fn report(start: Instant, dxdw: &Matrix, dj_dr: &Matrix3<f64>) -> Result<GradientReport> {
    let dj_dw = chain(dxdw, &mat3_to_vec(dj_dr))?;
    Ok(GradientReport { dj_dw, wall_time: elapsed(start), rank_failures: 0, fallback_used: false })
}

/// `dJ/dw` through the KKT system.
pub fn backward_registration_kkt(
    r: &Matrix3<f64>,
    inst: &RegistrationInstance,
    dj_dr: &Matrix3<f64>,
) -> Result<GradientReport> {
    let start = Instant::now();
    let j = registration_jacobian_kkt(r, inst)?;
    report(start, &j, dj_dr)
}

/// `dJ/dw` through the closed-form SVD derivatives.
pub fn backward_registration_svd(
    _r: &Matrix3<f64>,
    inst: &RegistrationInstance,
    dj_dr: &Matrix3<f64>,
) -> Result<GradientReport> {
    let start = Instant::now();
    let j = registration_jacobian_svd(inst)?;
    report(start, &j, dj_dr)
}

/// Convenience: `dJ/dw` of the geodesic loss `J(R(w))` with either method.
pub fn geodesic_weight_gradient(inst: &RegistrationInstance, use_svd: bool) -> Result<(f64, DVector<f64>)> {
    use crate::systems::UpperLoss;
    let r = crate::solvers::solve_kabsch(inst)?;
    let upper = registration_losses(inst).upper;
    let rep = if use_svd {
        backward_registration_svd(&r, inst, &upper.grad(&r))?
    } else {
        backward_registration_kkt(&r, inst, &upper.grad(&r))?
    };
    Ok((upper.value(&r), rep.dj_dw))
}
