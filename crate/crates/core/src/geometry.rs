//! Small fixed-size helpers shared by the solvers, systems and backward passes.

use nalgebra::{DVector, Matrix3, Vector2, Vector3};

/// A correspondence between normalized image points `q` (first view) and
/// `qt` (second view), stored inhomogeneously; the homogeneous forms always
/// carry a third coordinate of 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub q: Vector2<f64>,
    pub qt: Vector2<f64>,
}

impl Match {
    pub fn new(q: Vector2<f64>, qt: Vector2<f64>) -> Self {
        Self { q, qt }
    }

    /// Canonicalises homogeneous points by dividing through by the third coordinate.
    pub fn from_homogeneous(q: Vector3<f64>, qt: Vector3<f64>) -> Option<Self> {
        if q.z.abs() < 1e-12 || qt.z.abs() < 1e-12 {
            return None;
        }
        Some(Self { q: q.xy() / q.z, qt: qt.xy() / qt.z })
    }

    pub fn q_h(&self) -> Vector3<f64> {
        self.q.push(1.0)
    }

    pub fn qt_h(&self) -> Vector3<f64> {
        self.qt.push(1.0)
    }

    /// `qt^T M q`
    pub fn epipolar_residual(&self, m: &Matrix3<f64>) -> f64 {
        self.qt_h().dot(&(m * self.q_h()))
    }

    /// Row of the linear design matrix: coefficient of `M[(a, b)]` (row-major) is `qt_a q_b`.
    pub fn design_row(&self) -> [f64; 9] {
        let qt = self.qt_h();
        let q = self.q_h();
        let mut row = [0.0; 9];
        for a in 0..3 {
            for b in 0..3 {
                row[3 * a + b] = qt[a] * q[b];
            }
        }
        row
    }
}

/// Packs matches as `[q_x, q_y, qt_x, qt_y]` per match.
pub fn pack_matches(matches: &[Match]) -> DVector<f64> {
    DVector::from_iterator(
        matches.len() * 4,
        matches.iter().flat_map(|m| [m.q.x, m.q.y, m.qt.x, m.qt.y]),
    )
}

pub fn unpack_matches(params: &DVector<f64>) -> Vec<Match> {
    params
        .as_slice()
        .chunks_exact(4)
        .map(|c| Match::new(Vector2::new(c[0], c[1]), Vector2::new(c[2], c[3])))
        .collect()
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Row-major flattening.
pub fn mat3_to_vec(m: &Matrix3<f64>) -> DVector<f64> {
    DVector::from_iterator(9, (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])))
}

pub fn vec_to_mat3(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&v[..9])
}

/// Scales to unit Frobenius norm and makes the largest-magnitude entry
/// positive (first row-major index wins ties).
pub fn normalize_model(m: &Matrix3<f64>) -> Matrix3<f64> {
    let n = m.norm();
    let m = if n > 0.0 { m / n } else { *m };
    m * model_sign(&m)
}

/// Sign that makes the largest-magnitude (row-major first) entry positive.
pub fn model_sign(m: &Matrix3<f64>) -> f64 {
    let mut best = 0.0f64;
    for r in 0..3 {
        for c in 0..3 {
            if m[(r, c)].abs() > best.abs() {
                best = m[(r, c)];
            }
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// `min(||a - b||_F, ||a + b||_F)`
pub fn sign_folded_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).norm().min((a + b).norm())
}

/// Cofactor matrix, i.e. the gradient of `det` with respect to the entries.
pub fn cofactor(m: &Matrix3<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
        m[(r1, c1)] * m[(r2, c2)] - m[(r1, c2)] * m[(r2, c1)]
    })
}

/// Rotation angle between two rotations, `arccos((tr(a b^T) - 1) / 2)`.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let u = ((a * b.transpose()).trace() - 1.0) / 2.0;
    u.clamp(-1.0, 1.0).acos()
}

/// Rodrigues' formula for a rotation of `angle` about `axis` (normalised internally).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = skew(&k);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}
