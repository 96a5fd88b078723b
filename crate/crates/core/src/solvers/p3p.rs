//! P3P depths by the classical reduction of the three distance constraints to a quartic.

use nalgebra::{DVector, Vector3};
#[cfg(test)]
use nalgebra::Matrix3;

use crate::ift::ConstraintSystem;
use crate::numerics::Matrix;
use crate::solvers::{Result, SolverError};
use crate::systems::p3p::P3pSystem;

/// Newton iterations spent polishing each quartic root.
const POLISH_ITERS: usize = 30;

/// Three world points and their homogeneous image directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P3pInstance {
    pub points: [Vector3<f64>; 3],
    pub dirs: [Vector3<f64>; 3],
}

impl P3pInstance {
    /// Packs as `[A1; A2; A3; a1; a2; a3]`.
    pub fn to_params(&self) -> DVector<f64> {
        DVector::from_iterator(
            18,
            self.points.iter().chain(self.dirs.iter()).flat_map(|v| v.iter().copied()),
        )
    }

    pub fn from_params(a: &DVector<f64>) -> Self {
        let v = |i: usize| Vector3::new(a[3 * i], a[3 * i + 1], a[3 * i + 2]);
        Self { points: [v(0), v(1), v(2)], dirs: [v(3), v(4), v(5)] }
    }

    /// Instance built from world points and the same points in camera
    /// coordinates; the true depths are then the camera-frame `z` values.
    pub fn from_camera_points(points_world: [Vector3<f64>; 3], points_cam: [Vector3<f64>; 3]) -> Self {
        Self { points: points_world, dirs: points_cam.map(|p| p / p.z) }
    }

    fn validate(&self) -> Result<()> {
        let [a, b, c] = self.points;
        let cross = (b - a).cross(&(c - a));
        let scale = (b - a).norm_squared().max((c - a).norm_squared()).max(1e-300);
        if cross.norm() <= 1e-10 * scale {
            return Err(SolverError::DegenerateConfiguration("world points are collinear".into()));
        }
        if self.dirs.iter().any(|d| d.z == 0.0 || !d.iter().all(|v| v.is_finite())) {
            return Err(SolverError::DegenerateConfiguration(
                "image direction has zero third coordinate".into(),
            ));
        }
        Ok(())
    }
}

// Ascending-coefficient polynomial helpers.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += y;
    }
    out
}

fn poly_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

fn poly_eval(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Real roots of an ascending-coefficient polynomial via companion-matrix eigenvalues.
/// Near-real roots (small imaginary part) are kept; callers polish and verify.
pub(crate) fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.to_vec();
    while c.len() > 1 && c.last().unwrap().abs() <= 1e-14 * scale {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = c[deg];
    let mut comp = Matrix::zeros(deg, deg);
    for i in 0..deg {
        comp[(0, i)] = -c[deg - 1 - i] / lead;
        if i + 1 < deg {
            comp[(i + 1, i)] = 1.0;
        }
    }
    let Some(schur) = comp.try_schur(f64::EPSILON, 10_000) else {
        return Vec::new();
    };
    schur
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

/// Newton iterations on `h(x, a) = 0`.
/// Newton refinement; returns the iterate with the smallest residual seen.
fn polish(sys: &P3pSystem, x: &mut DVector<f64>, a: &DVector<f64>) {
    let mut best = (sys.eval(x, a).amax(), x.clone());
    let mut y = x.clone();
    for _ in 0..POLISH_ITERS {
        if best.0 == 0.0 {
            break;
        }
        let r = sys.eval(&y, a);
        let Some(step) = sys.jac_x(&y, a).lu().solve(&r) else { break };
        y -= step;
        let res = sys.eval(&y, a).amax();
        if !res.is_finite() {
            break;
        }
        if res < best.0 {
            best = (res, y.clone());
        }
    }
    *x = best.1;
}

/// All real depth vectors (up to 8) satisfying the three distance constraints.
///
/// Solutions come in `x, -x` pairs since the constraints are even in `x`;
/// no positivity filter is applied.
pub fn solve_p3p(inst: &P3pInstance) -> Result<Vec<Vector3<f64>>> {
    inst.validate()?;
    let a = inst.to_params();
    let norms = inst.dirs.map(|d| d.norm());
    let b = [0, 1, 2].map(|i| inst.dirs[i] / norms[i]);
    let [p1w, p2w, p3w] = inst.points;
    let d12 = (p1w - p2w).norm_squared();
    let d13 = (p1w - p3w).norm_squared();
    let d23 = (p2w - p3w).norm_squared();
    let (c12, c13, c23) = (b[0].dot(&b[1]), b[0].dot(&b[2]), b[1].dot(&b[2]));
    let (r3, r2) = (d13 / d12, d23 / d12);

    // With s1 = s, s2 = u s, s3 = v s:
    //   v^2 + p1 v + q1(u) = 0  and  v^2 + p2(u) v + q2(u) = 0.
    let p1 = [-2.0 * c13];
    let q1 = [1.0 - r3, 2.0 * r3 * c12, -r3];
    let p2 = [0.0, -2.0 * c23];
    let q2 = [-r2, 2.0 * r2 * c12, 1.0 - r2];
    let pd = poly_add(&p1, &poly_scale(&p2, -1.0));
    let dd = poly_add(&q1, &poly_scale(&q2, -1.0));
    // (p1 - p2) v = -(q1 - q2); substitute into the first quadratic.
    let quartic = poly_add(
        &poly_add(&poly_mul(&dd, &dd), &poly_scale(&poly_mul(&dd, &pd), -p1[0])),
        &poly_mul(&q1, &poly_mul(&pd, &pd)),
    );

    let sys = P3pSystem;
    let scale = d12.max(d13).max(d23);
    let mut out: Vec<(Vector3<f64>, f64)> = Vec::new();
    let push = |x: DVector<f64>, out: &mut Vec<(Vector3<f64>, f64)>| {
        let mut x = x;
        polish(&sys, &mut x, &a);
        if !(sys.eval(&x, &a).amax() <= 1e-8 * scale.max(1.0)) {
            return;
        }
        let res = sys.eval(&x, &a).amax();
        let x = Vector3::new(x[0], x[1], x[2]);
        let tol = 1e-6 * x.norm().max(1.0);
        match out.iter().position(|(y, _)| (y - x).norm() < tol) {
            Some(i) if res < out[i].1 => out[i] = (x, res),
            Some(_) => {}
            None => out.push((x, res)),
        }
    };

    for u in real_roots(&quartic) {
        // v = -D/P from the difference of the quadratics; the roots of the first
        // quadratic are also tried since P and D vanish together at symmetric
        // configurations. Spurious values fail the residual check below.
        let mut vs = Vec::with_capacity(3);
        let pu = poly_eval(&pd, u);
        if pu != 0.0 {
            vs.push(-poly_eval(&dd, u) / pu);
        }
        let disc = p1[0] * p1[0] - 4.0 * poly_eval(&q1, u);
        if disc >= 0.0 {
            vs.push((-p1[0] + disc.sqrt()) / 2.0);
            vs.push((-p1[0] - disc.sqrt()) / 2.0);
        }
        let denom = 1.0 + u * u - 2.0 * u * c12;
        if denom <= 0.0 {
            continue;
        }
        let s = (d12 / denom).sqrt();
        for v in vs {
            let x = DVector::from_vec(vec![s / norms[0], u * s / norms[1], v * s / norms[2]]);
            push(x.clone(), &mut out);
            push(-x, &mut out);
        }
    }
    let mut out: Vec<Vector3<f64>> = out.into_iter().map(|(x, _)| x).collect();
    out.sort_by(|x, y| y.x.total_cmp(&x.x).then(y.y.total_cmp(&x.y)).then(y.z.total_cmp(&x.z)));
    Ok(out)
}

/// Camera-frame coordinates `R A_i + t`.
#[cfg(test)]
pub(crate) fn camera_points(r: &Matrix3<f64>, t: &Vector3<f64>, pts: &[Vector3<f64>; 3]) -> [Vector3<f64>; 3] {
    pts.map(|p| r * p + t)
}
