//! Weighted 8-point fundamental matrix: `dF/dw` through declarative nodes and
//! through closed-form eigen/SVD perturbation.
//!
//! The forward pass is a chain `w -> F0 -> F_unit -> F`, where `F0` minimises the
//! weighted algebraic error on the unit sphere, `F_unit` is the unit-norm rank-2
//! matrix closest to `F0` (both in normalised coordinates) and `F` maps back to
//! the input coordinates. The KKT route differentiates the first two stages as
//! constrained argmins; the SVD route differentiates the eigenvector and the
//! truncation explicitly. The last stage is shared.

use std::time::Instant;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::backward::{chain, elapsed, BackwardError, GradientReport, Result, SPECTRUM_GAP};
use crate::geometry::{mat3_to_vec, vec_to_mat3};
use crate::ift::build_kkt;
use crate::numerics::Matrix;
use crate::solvers::{EpipolarInstance, FundamentalEstimate};
use crate::systems::{AlgebraicObjective, DetAndNorm, ProjectionObjective, UnitNorm};

/// `dF/dw` (`9 x N`) as the product of the two KKT solution Jacobians.
pub fn fundamental_jacobian_kkt(est: &FundamentalEstimate, inst: &EpipolarInstance) -> Result<Matrix> {
    let f0 = mat3_to_vec(&est.f0);
    let node1 = build_kkt(AlgebraicObjective::new(&est.normalized_matches(&inst.matches)), UnitNorm)?;
    let df0_dw = node1.primal_jacobian(&f0, &inst.w, None)?.dxda;

    let node2 = build_kkt(ProjectionObjective, DetAndNorm)?;
    let df_df0 = node2.primal_jacobian(&mat3_to_vec(&est.f_unit), &f0, None)?.dxda;
    Ok(denormalization_jacobian(est) * df_df0 * df0_dw)
}

/// `dF/dF_unit` (`9 x 9`) of `F = sign * D / ||D||`, `D = t2^T F_unit t1`.
pub fn denormalization_jacobian(est: &FundamentalEstimate) -> Matrix {
    let d = est.denormalized();
    let dn = d.norm();
    let fhat = mat3_to_vec(&(d / dn));
    // vec(t2^T X t1)[3a + b] = sum_{c,d} t2[c, a] X[c, d] t1[d, b]
    let k = Matrix::from_fn(9, 9, |r, c| est.t2[(c / 3, r / 3)] * est.t1[(c % 3, r % 3)]);
    let proj = Matrix::identity(9, 9) - &fhat * fhat.transpose();
    proj * k * (est.sign / dn)
}

/// `dF/dw` (`9 x N`) by first-order perturbation of the smallest eigenvector of
/// `G = sum_i w_i a_i a_i^T` followed by the rank-2 truncation and normalisation.
pub fn fundamental_jacobian_svd(est: &FundamentalEstimate, inst: &EpipolarInstance) -> Result<Matrix> {
    let rows: Vec<nalgebra::SVector<f64, 9>> =
        est.normalized_matches(&inst.matches).iter().map(|m| nalgebra::SVector::<f64, 9>::from_row_slice(&m.design_row())).collect();
    let g = rows
        .iter()
        .zip(inst.w.iter())
        .fold(nalgebra::SMatrix::<f64, 9, 9>::zeros(), |acc, (a, w)| acc + a * a.transpose() * *w);
    let eig = SymmetricEigen::new(g);
    let n = eig.eigenvalues.imin();
    let mu_n = eig.eigenvalues[n];
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let f0v = nalgebra::SVector::<f64, 9>::from_row_slice(mat3_to_vec(&est.f0).as_slice());

    // rank-2 truncation pieces of F0
    let (u, s, v) = crate::numerics::svd3(&est.f0)?;
    let gap = (s[0] - s[1]).abs().min(s[1] - s[2]);
    if gap < SPECTRUM_GAP * s[0] {
        return Err(BackwardError::DegenerateSpectrum { gap });
    }
    let fp_norm = est.f_proj.norm();
    let f_unit = est.f_unit;

    let mut out = Matrix::zeros(9, inst.matches.len());
    for (col, a) in rows.iter().enumerate() {
        // stage 1: dv = -sum_{k != n} v_k (v_k^T a)(a^T v) / (mu_k - mu_n)
        let av = a.dot(&f0v);
        let mut dv = nalgebra::SVector::<f64, 9>::zeros();
        for k in 0..9 {
            if k == n {
                continue;
            }
            let gap = eig.eigenvalues[k] - mu_n;
            if gap.abs() < SPECTRUM_GAP * scale {
                return Err(BackwardError::DegenerateSpectrum { gap: gap.abs() });
            }
            let vk = eig.eigenvectors.column(k);
            dv -= vk * (vk.dot(a) * av / gap);
        }
        let df0 = vec_to_mat3(dv.as_slice());

        // stage 2: derivative of F0 - s3 u3 v3^T in the (U, V) frame
        let p = u.transpose() * df0 * v;
        let mut m = p;
        m[(2, 2)] = 0.0;
        for i in 0..2 {
            let den = s[2] * s[2] - s[i] * s[i];
            let om_u = (s[2] * p[(i, 2)] + s[i] * p[(2, i)]) / den;
            let om_v = (s[i] * p[(i, 2)] + s[2] * p[(2, i)]) / den;
            m[(i, 2)] -= s[2] * om_u;
            m[(2, i)] -= s[2] * om_v;
        }
        let dfp = u * m * v.transpose();
        let df = (dfp - f_unit * f_unit.dot(&dfp)) / fp_norm;
        out.set_column(col, &mat3_to_vec(&df));
    }
    Ok(denormalization_jacobian(est) * out)
}

fn report(start: Instant, dxdw: &Matrix, dj_df: &Matrix3<f64>) -> Result<GradientReport> {
    let dj_dw = chain(dxdw, &mat3_to_vec(dj_df))?;
    Ok(GradientReport { dj_dw, wall_time: elapsed(start), rank_failures: 0, fallback_used: false })
}

pub fn backward_fundamental_kkt(
    est: &FundamentalEstimate,
    inst: &EpipolarInstance,
    dj_df: &Matrix3<f64>,
) -> Result<GradientReport> {
    let start = Instant::now();
    let j = fundamental_jacobian_kkt(est, inst)?;
    report(start, &j, dj_df)
}

pub fn backward_fundamental_svd(
    est: &FundamentalEstimate,
    inst: &EpipolarInstance,
    dj_df: &Matrix3<f64>,
) -> Result<GradientReport> {
    let start = Instant::now();
    let j = fundamental_jacobian_svd(est, inst)?;
    report(start, &j, dj_df)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::fd::{fd_oracle, FdOptions};
    use crate::backward::ProblemInstance;
    use crate::numerics::relative_error;
    use crate::solvers::solve_fundamental_8pt;
    use crate::synthetic::{make_two_view, rng_from_seed, SceneConfig};
    use crate::systems::{FrobeniusToGt, UpperLoss};
    use nalgebra::DVector;
    use rand::Rng;

    fn instance(seed: u64, noise: f64) -> EpipolarInstance {
        let cfg = SceneConfig { n_points: 12, noise_sigma: noise, n_outliers: 1, seed, intrinsics: Some([1.2, 0.05, -0.05]), ..Default::default() };
        let mut inst = make_two_view(&cfg).unwrap().instance;
        let mut rng = rng_from_seed(seed);
        inst.w = DVector::from_fn(12, |_, _| rng.random_range(0.2..1.0));
        inst
    }

    #[test]
    fn kkt_matches_fd_seed_37() {
        let inst = instance(37, 1e-3);
        let est = solve_fundamental_8pt(&inst).unwrap();
        let kkt = fundamental_jacobian_kkt(&est, &inst).unwrap();
        let fd = fd_oracle(&ProblemInstance::Fundamental { inst: inst.clone() }, &FdOptions::default()).unwrap();
        assert!(relative_error(&kkt, &fd) < 1e-3, "{}", relative_error(&kkt, &fd));
    }

    #[test]
    fn svd_matches_kkt() {
        for seed in 0..20 {
            let inst = instance(seed, 1e-3);
            let est = solve_fundamental_8pt(&inst).unwrap();
            let kkt = fundamental_jacobian_kkt(&est, &inst).unwrap();
            let svd = fundamental_jacobian_svd(&est, &inst).unwrap();
            assert!(relative_error(&svd, &kkt) < 1e-6, "seed {seed}: {}", relative_error(&svd, &kkt));
        }
    }

    #[test]
    fn pixel_scale_methods_agree() {
        for seed in [4u64, 7] {
            let cfg = SceneConfig { intrinsics: Some([1000.0, 500.0, 500.0]), noise_sigma: 0.5, ..SceneConfig::fundamental_toy(seed) };
            let inst = make_two_view(&cfg).unwrap().instance;
            let est = solve_fundamental_8pt(&inst).unwrap();
            let kkt = fundamental_jacobian_kkt(&est, &inst).unwrap();
            let svd = fundamental_jacobian_svd(&est, &inst).unwrap();
            let fd = fd_oracle(&ProblemInstance::Fundamental { inst: inst.clone() }, &FdOptions::default()).unwrap();
            assert!(relative_error(&svd, &kkt) < 1e-6, "seed {seed}: {}", relative_error(&svd, &kkt));
            assert!(relative_error(&kkt, &fd) < 1e-4, "seed {seed}: {}", relative_error(&kkt, &fd));
        }
    }

    #[test]
    fn denormalization_matches_fd() {
        let inst = instance(5, 1e-3);
        let est = solve_fundamental_8pt(&inst).unwrap();
        let j = denormalization_jacobian(&est);
        let map = |x: &Matrix3<f64>| {
            let d = est.t2.transpose() * x * est.t1;
            mat3_to_vec(&(d / d.norm() * est.sign))
        };
        let h = 1e-6;
        for c in 0..9 {
            let mut e = Matrix3::zeros();
            e[(c / 3, c % 3)] = h;
            let col = (map(&(est.f_unit + e)) - map(&(est.f_unit - e))) / (2.0 * h);
            assert!((col - j.column(c)).norm() < 1e-7, "column {c}");
        }
    }

    #[test]
    fn zero_upper_gradient() {
        let inst = instance(4, 0.0);
        let est = solve_fundamental_8pt(&inst).unwrap();
        let g = backward_fundamental_kkt(&est, &inst, &Matrix3::zeros()).unwrap();
        assert_eq!(g.dj_dw, DVector::zeros(12));
    }

    #[test]
    fn toy_outlier_gradient_pushes_weight_down() {
        let scene = make_two_view(&SceneConfig::fundamental_toy(crate::synthetic::FUNDAMENTAL_TOY_SEED)).unwrap();
        let inst = &scene.instance;
        let est = solve_fundamental_8pt(inst).unwrap();
        let upper = FrobeniusToGt::new(inst.gt);
        let g = backward_fundamental_kkt(&est, inst, &upper.grad(&est.f)).unwrap();
        assert!(g.dj_dw[scene.outliers[0]] > 0.0, "{}", g.dj_dw);
    }
}
