//! Central-difference Jacobians of solver outputs, re-running the forward
//! solver at perturbed parameters and tracking the root of interest.

use nalgebra::DVector;

use crate::backward::{BackwardError, ProblemInstance, Result};
use crate::geometry::{mat3_to_vec, unpack_matches};
use crate::numerics::Matrix;
use crate::solvers::{solve_essential_5pt, solve_fundamental_8pt, solve_kabsch, solve_p3p, P3pInstance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    /// Step relative to the parameter magnitude.
    pub rel_step: f64,
    /// Absolute lower bound on the step.
    pub abs_floor: f64,
    /// The tracked candidate must be this many times closer than the runner-up.
    pub ratio: f64,
    /// Largest admissible move of the tracked solution, relative to `max(1, ||x||)`.
    pub max_jump: f64,
    /// Combine steps `h` and `h/2` so the truncation error drops from O(h^2) to O(h^4).
    pub richardson: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { rel_step: 1e-6, abs_floor: 1e-8, ratio: 100.0, max_jump: 1e-3, richardson: false }
    }
}

fn folded(c: &DVector<f64>, x: &DVector<f64>, fold_sign: bool) -> (f64, DVector<f64>) {
    let d = (c - x).norm();
    if fold_sign {
        let dn = (c + x).norm();
        if dn < d {
            return (dn, -c);
        }
    }
    (d, c.clone())
}

fn track(cands: &[DVector<f64>], x: &DVector<f64>, fold_sign: bool, opts: &FdOptions, param: usize) -> Result<DVector<f64>> {
    let mut ranked: Vec<(f64, DVector<f64>)> = cands.iter().map(|c| folded(c, x, fold_sign)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let Some((d1, best)) = ranked.first().cloned() else {
        return Err(BackwardError::TrackingFailure { param, reason: "solver returned no candidate".into() });
    };
    if d1 > opts.max_jump * x.norm().max(1.0) {
        return Err(BackwardError::TrackingFailure { param, reason: format!("nearest candidate moved by {d1:e}") });
    }
    if let Some((d2, _)) = ranked.get(1) {
        if *d2 < opts.ratio * d1 {
            return Err(BackwardError::TrackingFailure {
                param,
                reason: format!("ambiguous match: nearest {d1:e}, runner-up {d2:e}"),
            });
        }
    }
    Ok(best)
}

/// Central differences of the solution `x` of `solve` at parameters `a`.
///
/// `solve` returns all candidate solutions; at each perturbed point the one
/// nearest to `x` (optionally up to sign) is used.
pub fn fd_track(
    solve: impl Fn(&DVector<f64>) -> Result<Vec<DVector<f64>>>,
    a: &DVector<f64>,
    x: &DVector<f64>,
    fold_sign: bool,
    opts: &FdOptions,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.len(), a.len());
    for m in 0..a.len() {
        let step = (opts.rel_step * a[m].abs()).max(opts.abs_floor);
        let coarse = central(&solve, a, x, m, step, fold_sign, opts)?;
        if opts.richardson {
            let fine = central(&solve, a, x, m, 0.5 * step, fold_sign, opts)?;
            out.set_column(m, &((fine * 4.0 - coarse) / 3.0));
        } else {
            out.set_column(m, &coarse);
        }
    }
    Ok(out)
}

fn central(
    solve: &impl Fn(&DVector<f64>) -> Result<Vec<DVector<f64>>>,
    a: &DVector<f64>,
    x: &DVector<f64>,
    m: usize,
    step: f64,
    fold_sign: bool,
    opts: &FdOptions,
) -> Result<DVector<f64>> {
    let mut plus = a.clone();
    let mut minus = a.clone();
    plus[m] += step;
    minus[m] -= step;
    let xp = track(&solve(&plus)?, x, fold_sign, opts, m)?;
    let xm = track(&solve(&minus)?, x, fold_sign, opts, m)?;
    Ok((xp - xm) / (plus[m] - minus[m]))
}

type Solve<'a> = Box<dyn Fn(&DVector<f64>) -> Result<Vec<DVector<f64>>> + 'a>;

/// Forward solver of `instance` as a function of its parameters, and whether
/// solutions are only defined up to sign.
fn solver(instance: &ProblemInstance) -> (Solve<'_>, bool) {
    match instance {
        ProblemInstance::P3p { .. } => (
            Box::new(|a| {
                let sols = solve_p3p(&P3pInstance::from_params(a))?;
                Ok(sols.iter().map(|s| DVector::from_column_slice(s.as_slice())).collect())
            }),
            false,
        ),
        ProblemInstance::Registration { inst } => {
            (Box::new(|w| Ok(vec![mat3_to_vec(&solve_kabsch(&inst.with_weights(w.clone()))?)])), false)
        }
        ProblemInstance::Fundamental { inst } => {
            (Box::new(|w| Ok(vec![mat3_to_vec(&solve_fundamental_8pt(&inst.with_weights(w.clone()))?.f)])), true)
        }
        ProblemInstance::Essential { .. } => (
            Box::new(|m| Ok(solve_essential_5pt(&unpack_matches(m))?.candidates.iter().map(mat3_to_vec).collect())),
            true,
        ),
    }
}

/// Finite-difference solution Jacobian of `instance` (same layout as the
/// analytic methods).
pub fn fd_oracle(instance: &ProblemInstance, opts: &FdOptions) -> Result<Matrix> {
    let (solve, fold_sign) = solver(instance);
    fd_track(solve, &instance.params(), &instance.solution()?, fold_sign, opts)
}

/// Solution at parameters `a`, continued from the solution of `instance`
/// with the same tracking rules as [`fd_oracle`].
pub fn tracked_solution(instance: &ProblemInstance, a: &DVector<f64>, opts: &FdOptions) -> Result<DVector<f64>> {
    let (solve, fold_sign) = solver(instance);
    track(&solve(a)?, &instance.solution()?, fold_sign, opts, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::P3pInstance;
    use crate::systems::p3p::{example_parameters, example_root};
    use nalgebra::Vector3;

    #[test]
    fn linear_system_is_exact() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let b = DVector::from_vec(vec![0.3, -0.7]);
        let a = DVector::from_vec(vec![0.4, 1.5, -2.0]);
        let x = &m * &a + &b;
        // truncation error vanishes for a linear map, so a large step only removes roundoff
        let opts = FdOptions { rel_step: 1e-3, ..Default::default() };
        let j = fd_track(|a| Ok(vec![&m * a + &b]), &a, &x, false, &opts).unwrap();
        assert!((j - &m).amax() < 1e-10);
    }

    #[test]
    fn p3p_example_matches_analytic_solution() {
        let inst = P3pInstance::from_params(&example_parameters());
        let x = Vector3::from_column_slice(example_root().as_slice());
        let j = fd_oracle(&ProblemInstance::P3p { inst, x }, &FdOptions::default()).unwrap();
        let ift = crate::backward::p3p_jacobian(&x, &inst).unwrap();
        assert!((&j - &ift).amax() < 1e-6);
        for (r, c, v) in [(0, 0, -5.0 / 3.0), (0, 1, -4.0 / 3.0), (1, 1, 4.0 / 3.0), (2, 0, 1.0 / 3.0), (2, 16, -1.75)] {
            assert!((j[(r, c)] - v).abs() < 1e-6, "({r},{c}) {}", j[(r, c)]);
        }
    }

    #[test]
    fn richardson_cancels_the_cubic_term() {
        let a = DVector::from_vec(vec![0.7]);
        let x = DVector::from_vec(vec![0.7f64.powi(3)]);
        let cube = |a: &DVector<f64>| Ok(vec![DVector::from_element(1, a[0].powi(3))]);
        let opts = FdOptions { rel_step: 1e-2, max_jump: 1.0, ..Default::default() };
        let plain = fd_track(cube, &a, &x, false, &opts).unwrap()[(0, 0)];
        let rich = fd_track(cube, &a, &x, false, &FdOptions { richardson: true, ..opts }).unwrap()[(0, 0)];
        let exact = 3.0 * 0.49;
        assert!((plain - exact).abs() > 1e-6);
        assert!((rich - exact).abs() < 1e-12);
    }

    #[test]
    fn ambiguous_candidates_fail() {
        let a = DVector::from_vec(vec![1.0]);
        let x = DVector::from_vec(vec![1.0]);
        // two candidates that stay within a factor of two of each other
        let solve = |a: &DVector<f64>| Ok(vec![a.clone(), a.clone() * 1.0 + DVector::from_element(1, 1e-7)]);
        assert!(matches!(
            fd_track(solve, &a, &x, false, &FdOptions::default()),
            Err(BackwardError::TrackingFailure { .. })
        ));
        let far = |_: &DVector<f64>| Ok(vec![DVector::from_element(1, 5.0)]);
        assert!(matches!(
            fd_track(far, &a, &x, false, &FdOptions::default()),
            Err(BackwardError::TrackingFailure { .. })
        ));
    }

    #[test]
    fn sign_folding() {
        let a = DVector::from_vec(vec![2.0]);
        let x = DVector::from_vec(vec![2.0, 1.0]);
        let j = fd_track(|a| Ok(vec![-DVector::from_vec(vec![a[0], 1.0])]), &a, &x, true, &FdOptions::default()).unwrap();
        assert!((j[(0, 0)] - 1.0).abs() < 1e-8 && j[(1, 0)].abs() < 1e-8);
    }
}
