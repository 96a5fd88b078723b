//! Upper-level losses on a 3x3 model matrix and their gradients.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::Match;

/// Clamp margin for `arccos` in the geodesic gradient.
pub const ACOS_EPS: f64 = 1e-7;
/// Guard added to epipolar-line denominators.
pub const LINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpperLossKind {
    RotationGeodesic,
    FrobeniusToGt,
    SymmetricEpipolar,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("inlier set is empty")]
    EmptyInliers,
    #[error("inlier index {0} out of range")]
    BadInlier(usize),
    #[error("every inlier has a degenerate epipolar line")]
    DegenerateLine,
}

/// A scalar loss `J(M)` with gradient `dJ/dM` (same layout as `M`).
pub trait UpperLoss {
    fn kind(&self) -> UpperLossKind;
    fn value(&self, m: &Matrix3<f64>) -> f64;
    fn grad(&self, m: &Matrix3<f64>) -> Matrix3<f64>;
}

/// `arccos((tr(R R_true^T) - 1) / 2)`, the angle of the residual rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationGeodesic {
    pub r_true: Matrix3<f64>,
}

impl RotationGeodesic {
    fn cosine(&self, r: &Matrix3<f64>) -> f64 {
        ((r.component_mul(&self.r_true)).sum() - 1.0) / 2.0
    }
}

impl UpperLoss for RotationGeodesic {
    fn kind(&self) -> UpperLossKind {
        UpperLossKind::RotationGeodesic
    }

    fn value(&self, r: &Matrix3<f64>) -> f64 {
        self.cosine(r).clamp(-1.0, 1.0).acos()
    }

    fn grad(&self, r: &Matrix3<f64>) -> Matrix3<f64> {
        let u = self.cosine(r).clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS);
        self.r_true * (-0.5 / (1.0 - u * u).sqrt())
    }
}

/// `||M - s M_true||^2` where the sign `s` is the one closer to `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrobeniusToGt {
    pub gt: Matrix3<f64>,
}

impl FrobeniusToGt {
    pub fn new(gt: Matrix3<f64>) -> Self {
        Self { gt }
    }

    fn folded(&self, m: &Matrix3<f64>) -> Matrix3<f64> {
        if (m - self.gt).norm_squared() <= (m + self.gt).norm_squared() {
            self.gt
        } else {
            -self.gt
        }
    }
}

impl UpperLoss for FrobeniusToGt {
    fn kind(&self) -> UpperLossKind {
        UpperLossKind::FrobeniusToGt
    }
    fn value(&self, m: &Matrix3<f64>) -> f64 {
        (m - self.folded(m)).norm_squared()
    }
    fn grad(&self, m: &Matrix3<f64>) -> Matrix3<f64> {
        (m - self.folded(m)) * 2.0
    }
}

/// Mean symmetric epipolar distance over an inlier subset of `matches`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEpipolar {
    pub matches: Vec<Match>,
    pub inliers: Vec<usize>,
}

impl SymmetricEpipolar {
    pub fn new(matches: Vec<Match>, inliers: Vec<usize>) -> Result<Self, LossError> {
        if inliers.is_empty() {
            return Err(LossError::EmptyInliers);
        }
        if let Some(&i) = inliers.iter().find(|&&i| i >= matches.len()) {
            return Err(LossError::BadInlier(i));
        }
        Ok(Self { matches, inliers })
    }

    /// Value and gradient, or [`LossError::DegenerateLine`] when every inlier
    /// has both line denominators below the guard.
    pub fn evaluate(&self, e: &Matrix3<f64>) -> Result<(f64, Matrix3<f64>), LossError> {
        let mut value = 0.0;
        let mut grad = Matrix3::zeros();
        let mut healthy = false;
        for &i in &self.inliers {
            let m = &self.matches[i];
            let (q, qt) = (m.q_h(), m.qt_h());
            // l = E^T qt (line in the first view), lt = E q (line in the second)
            let l = e.transpose() * qt;
            let lt = e * q;
            let r = qt.dot(&lt);
            let d1 = l.x * l.x + l.y * l.y;
            let d2 = lt.x * lt.x + lt.y * lt.y;
            if d1 >= LINE_EPS || d2 >= LINE_EPS {
                healthy = true;
            }
            let (d1, d2) = (d1 + LINE_EPS, d2 + LINE_EPS);
            let c = 1.0 / d1 + 1.0 / d2;
            value += c * r * r;

            // dr/dE = qt q^T; dd1/dE = 2 qt (l_x e0 + l_y e1)^T; dd2/dE = 2 (lt_x e0 + lt_y e1) q^T
            let dr = qt * q.transpose();
            let l2 = nalgebra::Vector3::new(l.x, l.y, 0.0);
            let lt2 = nalgebra::Vector3::new(lt.x, lt.y, 0.0);
            let dd1 = qt * l2.transpose() * 2.0;
            let dd2 = lt2 * q.transpose() * 2.0;
            grad += dr * (2.0 * c * r) - (dd1 / (d1 * d1) + dd2 / (d2 * d2)) * (r * r);
        }
        if !healthy {
            return Err(LossError::DegenerateLine);
        }
        let n = self.inliers.len() as f64;
        Ok((value / n, grad / n))
    }
}

impl UpperLoss for SymmetricEpipolar {
    fn kind(&self) -> UpperLossKind {
        UpperLossKind::SymmetricEpipolar
    }
    fn value(&self, e: &Matrix3<f64>) -> f64 {
        self.evaluate(e).map(|(v, _)| v).unwrap_or(f64::NAN)
    }
    fn grad(&self, e: &Matrix3<f64>) -> Matrix3<f64> {
        self.evaluate(e).map(|(_, g)| g).unwrap_or_else(|_| Matrix3::from_element(f64::NAN))
    }
}

/// Symmetric epipolar loss of `e` over `inliers` with its gradient.
pub fn epipolar_upper_loss(
    e: &Matrix3<f64>,
    matches: &[Match],
    inliers: &[usize],
) -> Result<(f64, Matrix3<f64>), LossError> {
    SymmetricEpipolar::new(matches.to_vec(), inliers.to_vec())?.evaluate(e)
}

/// Central-difference gradient of a scalar function of a 3x3 matrix.
pub fn fd_matrix_gradient(f: impl Fn(&Matrix3<f64>) -> f64, m: &Matrix3<f64>, step: f64) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| {
        let mut plus = *m;
        let mut minus = *m;
        plus[(r, c)] += step;
        minus[(r, c)] -= step;
        (f(&plus) - f(&minus)) / (2.0 * step)
    })
}
