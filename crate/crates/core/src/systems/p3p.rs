//! Inter-point distance constraints of the P3P problem.
//!
//! Unknowns are the depths `x = [x1, x2, x3]`; parameters are packed as
//! `a = [A1; A2; A3; a1; a2; a3]` (world points, then homogeneous image
//! directions), and row `k` compares the distance between one pair of world
//! points with that of their back-projections:
//!
//! ```text
//! h_k(x, a) = ||A_i - A_j||^2 - ||x_i a_i - x_j a_j||^2,   (i, j) in {(1,2), (2,3), (3,1)}
//! ```

use nalgebra::{DVector, Vector3};

use crate::ift::ConstraintSystem;
use crate::numerics::Matrix;

const PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

#[derive(Debug, Clone, Copy, Default)]
pub struct P3pSystem;

pub fn p3p_system() -> P3pSystem {
    P3pSystem
}

fn world(a: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(a[3 * i], a[3 * i + 1], a[3 * i + 2])
}

fn direction(a: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(a[9 + 3 * i], a[9 + 3 * i + 1], a[9 + 3 * i + 2])
}

impl ConstraintSystem for P3pSystem {
    fn n_x(&self) -> usize {
        3
    }
    fn n_a(&self) -> usize {
        18
    }
    fn n_eq(&self) -> usize {
        3
    }

    fn eval(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            3,
            PAIRS.iter().map(|&(i, j)| {
                let d = direction(a, i) * x[i] - direction(a, j) * x[j];
                (world(a, i) - world(a, j)).norm_squared() - d.norm_squared()
            }),
        )
    }

    fn jac_x(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix {
        let mut jx = Matrix::zeros(3, 3);
        for (k, &(i, j)) in PAIRS.iter().enumerate() {
            let (ai, aj) = (direction(a, i), direction(a, j));
            let d = ai * x[i] - aj * x[j];
            jx[(k, i)] = -2.0 * ai.dot(&d);
            jx[(k, j)] = 2.0 * aj.dot(&d);
        }
        jx
    }

    fn jac_a(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix {
        let mut ja = Matrix::zeros(3, 18);
        for (k, &(i, j)) in PAIRS.iter().enumerate() {
            let diff = world(a, i) - world(a, j);
            let d = direction(a, i) * x[i] - direction(a, j) * x[j];
            for c in 0..3 {
                ja[(k, 3 * i + c)] = 2.0 * diff[c];
                ja[(k, 3 * j + c)] = -2.0 * diff[c];
                ja[(k, 9 + 3 * i + c)] = -2.0 * x[i] * d[c];
                ja[(k, 9 + 3 * j + c)] = 2.0 * x[j] * d[c];
            }
        }
        ja
    }
}

/// Parameter vector of the worked example used throughout the tests.
pub fn example_parameters() -> DVector<f64> {
    let third = 1.0 / 3.0;
    DVector::from_vec(vec![
        0.0, 0.0, 3.0, //
        2.0, 0.0, 3.0, //
        0.0, 6.0, 3.0, //
        -third, -third, 1.0, //
        third, -third, 1.0, //
        -third, 5.0 * third, 1.0,
    ])
}

/// The root `[3, 3, 3]` of [`example_parameters`].
pub fn example_root() -> DVector<f64> {
    DVector::from_vec(vec![3.0, 3.0, 3.0])
}
