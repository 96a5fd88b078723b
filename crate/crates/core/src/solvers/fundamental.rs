//! Weighted 8-point fundamental matrix with coordinate normalisation and
//! rank-2 projection.

use nalgebra::{DVector, Matrix3, Vector2, Vector3};

use crate::geometry::{model_sign, vec_to_mat3, Match};
use crate::numerics::{self, Matrix};
use crate::solvers::{Result, SolverError};

/// Matches with per-match weights and a reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarInstance {
    pub matches: Vec<Match>,
    pub w: DVector<f64>,
    pub gt: Matrix3<f64>,
}

impl EpipolarInstance {
    pub fn with_weights(&self, w: DVector<f64>) -> Self {
        Self { w, ..self.clone() }
    }
}

/// Intermediate stages of the 8-point estimate. `f0`, `f_proj` and `f_unit`
/// live in normalised coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalEstimate {
    /// Normalising similarities of the first and second view (independent of the weights).
    pub t1: Matrix3<f64>,
    pub t2: Matrix3<f64>,
    /// Unit-norm minimiser of the weighted algebraic error (full rank in general).
    pub f0: Matrix3<f64>,
    /// Rank-2 truncation of `f0` before renormalisation.
    pub f_proj: Matrix3<f64>,
    /// `f_proj / ||f_proj||`.
    pub f_unit: Matrix3<f64>,
    /// `sign * D / ||D||` with `D = t2^T f_unit t1`, in the input coordinates.
    pub f: Matrix3<f64>,
    pub sign: f64,
}

impl FundamentalEstimate {
    /// The matches mapped by `t1` and `t2`.
    pub fn normalized_matches(&self, matches: &[Match]) -> Vec<Match> {
        normalize_matches(matches, &self.t1, &self.t2)
    }

    /// `D = t2^T f_unit t1` before normalisation.
    pub fn denormalized(&self) -> Matrix3<f64> {
        self.t2.transpose() * self.f_unit * self.t1
    }
}

/// Similarity moving `points` to zero centroid and mean distance `sqrt(2)`.
pub fn hartley_transform(points: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let d = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(d > 1e-12 * (1.0 + c.norm())) || !d.is_finite() {
        return Err(SolverError::DegenerateConfiguration("points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / d;
    Ok(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

pub fn normalize_matches(matches: &[Match], t1: &Matrix3<f64>, t2: &Matrix3<f64>) -> Vec<Match> {
    let map = |t: &Matrix3<f64>, p: &Vector2<f64>| (t * p.push(1.0)).xy();
    matches.iter().map(|m| Match::new(map(t1, &m.q), map(t2, &m.qt))).collect()
}

/// Rows `sqrt(w_i) * vec(qt_i q_i^T)`.
pub fn weighted_design(matches: &[Match], w: &DVector<f64>) -> Matrix {
    let mut a = Matrix::zeros(matches.len(), 9);
    for (i, (m, wi)) in matches.iter().zip(w.iter()).enumerate() {
        let s = wi.max(0.0).sqrt();
        for (j, v) in m.design_row().iter().enumerate() {
            a[(i, j)] = s * v;
        }
    }
    a
}

pub fn solve_fundamental_8pt(inst: &EpipolarInstance) -> Result<FundamentalEstimate> {
    let n = inst.matches.len();
    if n < 8 || inst.w.len() != n {
        return Err(SolverError::DegenerateConfiguration(format!(
            "need at least 8 weighted matches, got {n} matches and {} weights",
            inst.w.len()
        )));
    }
    if inst.w.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(SolverError::DegenerateConfiguration("weights must be finite and non-negative".into()));
    }
    let q: Vec<_> = inst.matches.iter().map(|m| m.q).collect();
    let qt: Vec<_> = inst.matches.iter().map(|m| m.qt).collect();
    let (t1, t2) = (hartley_transform(&q)?, hartley_transform(&qt)?);
    let normalized = normalize_matches(&inst.matches, &t1, &t2);
    let design = weighted_design(&normalized, &inst.w);
    let dec = numerics::svd(&design)?;
    let smax = dec.sigma_max();
    let rank = dec.sigma.iter().filter(|&&s| s > 1e-12 * smax).count();
    if rank < 8 {
        return Err(SolverError::DegenerateConfiguration(format!("design matrix has rank {rank} < 8")));
    }
    let f0 = vec_to_mat3(dec.v.column(8).as_slice());

    let (u, s, v) = numerics::svd3(&f0)?;
    let f_proj = u * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], 0.0)) * v.transpose();
    let f_unit = f_proj / f_proj.norm();
    let d = t2.transpose() * f_unit * t1;
    let d = d / d.norm();
    let sign = model_sign(&d);
    Ok(FundamentalEstimate { t1, t2, f0, f_proj, f_unit, f: d * sign, sign })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, skew};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64, n: usize) -> (Vec<Match>, Matrix3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = axis_angle(&Vector3::new(0.3, 1.0, -0.2), 0.2);
        let t = Vector3::new(1.0, 0.1, 0.05);
        let k = Matrix3::new(1.2, 0.0, 0.1, 0.0, 1.1, -0.05, 0.0, 0.0, 1.0);
        let kinv = k.try_inverse().unwrap();
        let f = kinv.transpose() * skew(&t) * r * kinv;
        let matches = (0..n)
            .map(|_| {
                let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0));
                Match::from_homogeneous(k * x, k * (r * x + t)).unwrap()
            })
            .collect();
        (matches, f / f.norm())
    }

    #[test]
    fn noiseless_residuals_seed_9() {
        let (matches, _) = scene(9, 20);
        let inst = EpipolarInstance { w: DVector::from_element(20, 1.0), matches, gt: Matrix3::zeros() };
        let est = solve_fundamental_8pt(&inst).unwrap();
        for m in &inst.matches {
            assert!(m.epipolar_residual(&est.f).abs() < 1e-10);
        }
        assert!(est.f.determinant().abs() < 1e-12);
        assert!((est.f.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_ground_truth() {
        let (matches, f_true) = scene(10, 16);
        let inst = EpipolarInstance { w: DVector::from_element(16, 0.5), matches, gt: f_true };
        let est = solve_fundamental_8pt(&inst).unwrap();
        assert!(crate::geometry::sign_folded_distance(&est.f, &f_true) < 1e-9);
    }

    #[test]
    fn zero_weight_removes_outlier() {
        let (mut matches, _) = scene(11, 12);
        let clean = EpipolarInstance { w: DVector::from_element(12, 1.0), matches: matches.clone(), gt: Matrix3::zeros() };
        let base = solve_fundamental_8pt(&clean).unwrap().f;
        matches.push(Match::new(nalgebra::Vector2::new(0.3, -0.2), nalgebra::Vector2::new(-0.4, 0.5)));
        let mut w = DVector::from_element(13, 1.0);
        w[12] = 0.0;
        let est = solve_fundamental_8pt(&EpipolarInstance { w, matches, gt: Matrix3::zeros() }).unwrap();
        assert!((est.f - base).norm() < 1e-10);
    }

    #[test]
    fn normalisation_is_undone() {
        let (matches, f_true) = scene(13, 10);
        // pixel-like coordinates
        let k = Matrix3::new(800.0, 0.0, 400.0, 0.0, 800.0, 300.0, 0.0, 0.0, 1.0);
        let px = |p: &nalgebra::Vector2<f64>| (k * p.push(1.0)).xy();
        let pixel: Vec<Match> = matches.iter().map(|m| Match::new(px(&m.q), px(&m.qt))).collect();
        let kinv = k.try_inverse().unwrap();
        let f_px = kinv.transpose() * f_true * kinv;
        let inst = EpipolarInstance { w: DVector::from_element(10, 1.0), matches: pixel, gt: Matrix3::zeros() };
        let est = solve_fundamental_8pt(&inst).unwrap();
        assert!(crate::geometry::sign_folded_distance(&est.f, &(f_px / f_px.norm())) < 1e-9);
        for m in est.normalized_matches(&inst.matches) {
            assert!(m.epipolar_residual(&est.f_unit).abs() < 1e-10);
        }
        let c = est.normalized_matches(&inst.matches).iter().map(|m| m.q).sum::<nalgebra::Vector2<f64>>();
        assert!(c.norm() < 1e-10);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let p = vec![Vector2::new(1.0, 2.0); 4];
        assert!(hartley_transform(&p).is_err());
    }

    #[test]
    fn rank_deficient_design() {
        let (matches, _) = scene(12, 10);
        let mut w = DVector::from_element(10, 1.0);
        for i in 0..3 {
            w[i] = 0.0;
        }
        let inst = EpipolarInstance { w, matches, gt: Matrix3::zeros() };
        assert!(matches!(solve_fundamental_8pt(&inst), Err(SolverError::DegenerateConfiguration(_))));
    }
}
