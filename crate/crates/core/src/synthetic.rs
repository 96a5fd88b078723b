//! Seeded synthetic scenes: rotations, registration toys and two-view geometries.

use nalgebra::{DVector, Matrix3, UnitQuaternion, Vector2, Vector3, Quaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{axis_angle, normalize_model, skew, Match};
use crate::solvers::{EpipolarInstance, RegistrationInstance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
}

pub type Result<T> = std::result::Result<T, SyntheticError>;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of the `index`-th member of a family derived from `seed`, so that
/// batch members do not depend on evaluation order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Haar-uniform rotation from a normalised Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let mut g = || -> f64 { StandardNormal.sample(rng) };
    let q = Quaternion::new(g(), g(), g(), g());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_points: usize,
    /// Standard deviation of the image noise, in the units of the stored matches.
    pub noise_sigma: f64,
    pub n_outliers: usize,
    pub depth_range: (f64, f64),
    pub seed: u64,
    /// Maximum relative rotation angle between the two views (radians).
    pub max_rotation: f64,
    /// Calibration `[f, cx, cy]` shared by both views; `None` keeps normalised coordinates.
    pub intrinsics: Option<[f64; 3]>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_points: 50,
            noise_sigma: 0.0,
            n_outliers: 0,
            depth_range: (4.0, 8.0),
            seed: 0,
            max_rotation: 0.3,
            intrinsics: None,
        }
    }
}

impl SceneConfig {
    /// Fifteen matches, one of them an outlier, in pixel coordinates of a
    /// long-focal camera with half-pixel noise.
    pub fn fundamental_toy(seed: u64) -> Self {
        Self {
            n_points: 15,
            noise_sigma: 0.5,
            n_outliers: 1,
            depth_range: (4.0, 8.0),
            seed,
            max_rotation: 0.3,
            intrinsics: Some([8000.0, 4000.0, 4000.0]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SyntheticError::InvalidConfig(m.to_string()));
        if self.n_outliers >= self.n_points {
            return bad("n_outliers must be smaller than n_points");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("depth_range must satisfy 0 < min <= max");
        }
        if !(self.max_rotation >= 0.0) {
            return bad("max_rotation must be non-negative");
        }
        if let Some([f, _, _]) = self.intrinsics {
            if !(f > 0.0) {
                return bad("focal length must be positive");
            }
        }
        Ok(())
    }

    pub fn calibration(&self) -> Option<Matrix3<f64>> {
        self.intrinsics.map(|[f, cx, cy]| Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0))
    }
}

/// A generated two-view problem together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewScene {
    /// Matches, uniform weights `1/N`, and the reference model (`F_true` when
    /// calibrated, `E_gt` otherwise).
    pub instance: EpipolarInstance,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    /// `[t]_x R`, unit norm.
    pub e_gt: Matrix3<f64>,
    /// `K^-T E K^-1`, unit norm, when intrinsics are configured.
    pub f_true: Option<Matrix3<f64>>,
    pub inliers: Vec<usize>,
    pub outliers: Vec<usize>,
    /// Noise-free matches of the inliers (outliers keep their corrupted value).
    pub clean: Vec<Match>,
}

/// Seed of the default fundamental toy scene.
pub const FUNDAMENTAL_TOY_SEED: u64 = 38;

pub fn make_two_view(config: &SceneConfig) -> Result<TwoViewScene> {
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let r = axis_angle(&uniform_vec(&mut rng, -1.0, 1.0), rng.random_range(0.0..=config.max_rotation));
    let t = uniform_vec(&mut rng, -1.0, 1.0).normalize();
    if t.norm() < 0.5 {
        return Err(SyntheticError::DegenerateConfiguration("translation vanished".into()));
    }
    let (lo, hi) = config.depth_range;
    let k = config.calibration().unwrap_or_else(Matrix3::identity);

    let mut clean = Vec::with_capacity(config.n_points);
    while clean.len() < config.n_points {
        let depth = rng.random_range(lo..=hi);
        let x = Vector3::new(rng.random_range(-0.5..0.5) * depth, rng.random_range(-0.5..0.5) * depth, depth);
        let y = r * x + t;
        if y.z < 0.1 * lo {
            continue;
        }
        let m = Match::from_homogeneous(k * x, k * y).expect("positive depths");
        clean.push(m);
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut matches: Vec<Match> = clean
        .iter()
        .map(|m| {
            if config.noise_sigma == 0.0 {
                *m
            } else {
                let mut n = || noise.sample(&mut rng);
                Match::new(m.q + Vector2::new(n(), n()), m.qt + Vector2::new(n(), n()))
            }
        })
        .collect();

    // outliers: the second-view point is resampled uniformly over the image domain
    let (lo2, hi2) = clean.iter().fold(
        (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY)),
        |(a, b), m| (a.inf(&m.qt), b.sup(&m.qt)),
    );
    let mut outliers = rand::seq::index::sample(&mut rng, config.n_points, config.n_outliers).into_vec();
    outliers.sort_unstable();
    for &i in &outliers {
        matches[i].qt = Vector2::new(rng.random_range(lo2.x..=hi2.x), rng.random_range(lo2.y..=hi2.y));
    }
    let inliers = (0..config.n_points).filter(|i| !outliers.contains(i)).collect();

    let e_gt = normalize_model(&(skew(&t) * r));
    let f_true = config.calibration().map(|k| {
        let kinv = k.try_inverse().expect("invertible calibration");
        normalize_model(&(kinv.transpose() * e_gt * kinv))
    });
    let n = config.n_points as f64;
    let instance = EpipolarInstance {
        w: DVector::from_element(config.n_points, 1.0 / n),
        gt: f_true.unwrap_or(e_gt),
        matches,
    };
    Ok(TwoViewScene { instance, r, t, e_gt, f_true, inliers, outliers, clean })
}

/// Registration toy: a few random points, identity ground truth, and one
/// correspondence (index 0) displaced by a fixed offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationToyConfig {
    pub n_points: usize,
    pub seed: u64,
    /// Half-width of the cube the points are drawn from.
    pub extent: f64,
    pub corruption: [f64; 3],
}

impl Default for RegistrationToyConfig {
    fn default() -> Self {
        Self { n_points: 4, seed: 0, extent: 1.0, corruption: [0.0, 1.5, 0.5] }
    }
}

pub fn make_registration_toy(config: &RegistrationToyConfig) -> Result<RegistrationInstance> {
    if config.n_points < 3 {
        return Err(SyntheticError::InvalidConfig("registration toy needs at least 3 points".into()));
    }
    if !(config.extent > 0.0) {
        return Err(SyntheticError::InvalidConfig("extent must be positive".into()));
    }
    let mut rng = rng_from_seed(config.seed);
    let p: Vec<Vector3<f64>> = (0..config.n_points).map(|_| uniform_vec(&mut rng, -config.extent, config.extent)).collect();
    let mut q = p.clone();
    q[0] += Vector3::from(config.corruption);
    let n = config.n_points as f64;
    Ok(RegistrationInstance { p, q, w: DVector::from_element(config.n_points, 1.0 / n), r_true: Matrix3::identity() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle;
    use crate::solvers::solve_kabsch;
    use crate::systems::losses::{RotationGeodesic, UpperLoss};

    #[test]
    fn rotations_are_deterministic_and_orthonormal() {
        let a = random_rotation(&mut rng_from_seed(0));
        let b = random_rotation(&mut rng_from_seed(0));
        assert_eq!(a, b);
        assert!((a * a.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((a.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn haar_mean_angle() {
        let mut rng = rng_from_seed(1);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| rotation_angle(&random_rotation(&mut rng), &Matrix3::identity()))
            .sum::<f64>()
            / n as f64;
        // E[theta] = pi/2 + 2/pi under the Haar measure
        let expected = std::f64::consts::FRAC_PI_2 + 2.0 / std::f64::consts::PI;
        assert!((mean - expected).abs().to_degrees() < 1.0, "{}", mean.to_degrees());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn registration_toy_defaults() {
        let inst = make_registration_toy(&RegistrationToyConfig::default()).unwrap();
        assert_eq!(inst.len(), 4);
        assert_eq!(inst.w.as_slice(), &[0.25; 4]);
        assert_eq!(inst, make_registration_toy(&RegistrationToyConfig::default()).unwrap());
        let r = solve_kabsch(&inst).unwrap();
        assert!(RotationGeodesic { r_true: inst.r_true }.value(&r) > 0.0);

        let clean = make_registration_toy(&RegistrationToyConfig { corruption: [0.0; 3], ..Default::default() }).unwrap();
        let r = solve_kabsch(&clean).unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-12);
        assert!(RotationGeodesic { r_true: clean.r_true }.value(&r) < 1e-7);
    }

    #[test]
    fn noiseless_two_view_seed_43() {
        let cfg = SceneConfig { n_points: 30, seed: 43, ..Default::default() };
        let scene = make_two_view(&cfg).unwrap();
        for m in &scene.instance.matches {
            assert!(m.epipolar_residual(&scene.e_gt).abs() < 1e-10);
        }
        assert_eq!(scene.instance.gt, scene.e_gt);
        assert_eq!(scene, make_two_view(&cfg).unwrap());
    }

    #[test]
    fn fundamental_toy_shape() {
        let scene = make_two_view(&SceneConfig::fundamental_toy(3)).unwrap();
        assert_eq!(scene.instance.matches.len(), 15);
        assert_eq!(scene.inliers.len(), 14);
        assert_eq!(scene.outliers.len(), 1);
        let f = scene.f_true.unwrap();
        let res = |m: &Match| m.epipolar_residual(&f).abs();
        for &i in &scene.inliers {
            assert!(res(&scene.clean[i]) < 1e-10);
        }
        let noisy = scene.inliers.iter().map(|&i| res(&scene.instance.matches[i])).fold(0.0, f64::max);
        assert!(res(&scene.instance.matches[scene.outliers[0]]) > 10.0 * noisy);
    }

    #[test]
    fn residual_rms_scales_with_sigma() {
        let rms = |sigma: f64| {
            let scene = make_two_view(&SceneConfig { n_points: 200, noise_sigma: sigma, seed: 5, ..Default::default() }).unwrap();
            let s: f64 = scene.instance.matches.iter().map(|m| m.epipolar_residual(&scene.e_gt).powi(2)).sum();
            (s / 200.0).sqrt()
        };
        let (a, b) = (rms(1e-4), rms(2e-4));
        assert!((b / a - 2.0).abs() < 0.05, "{a} {b}");
    }

    #[test]
    fn invalid_configs() {
        let bad = SceneConfig { n_points: 3, n_outliers: 3, ..Default::default() };
        assert!(make_two_view(&bad).is_err());
        let bad = SceneConfig { depth_range: (0.0, 1.0), ..Default::default() };
        assert!(make_two_view(&bad).is_err());
        let bad = SceneConfig { noise_sigma: -1.0, ..Default::default() };
        assert!(make_two_view(&bad).is_err());
    }
}
