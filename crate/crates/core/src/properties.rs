//! Property suites over seeded random inputs: solver contracts, derivative
//! self-checks, convergence of the first-order root prediction, cross-method
//! agreement and determinism. Each suite returns one pass/fail [`Check`].

use nalgebra::{DVector, Vector3};
use rand::Rng;

use crate::backward::fd::{tracked_solution, FdOptions};
use crate::backward::{solution_jacobian, BackwardError, BackwardMethod, Problem, ProblemInstance};
use crate::experiments::{
    bench_essential, gradcheck, random_instance, toy_registration, BenchOptions, Check, GradcheckOptions, ToyOptions,
};
use crate::geometry::{mat3_to_vec, pack_matches, sign_folded_distance};
use crate::ift::{build_kkt, ift_jacobian, ift_jacobian_pinv, self_check_system, ConstraintSystem};
use crate::numerics::{pseudoinverse, relative_error, Matrix};
use crate::parallel::Exec;
use crate::report::RunReport;
use crate::solvers::{solve_essential_5pt, solve_kabsch, RegistrationInstance};
use crate::synthetic::{derive_seed, make_two_view, random_rotation, rng_from_seed, RegistrationToyConfig, SceneConfig};
use crate::systems::losses::fd_matrix_gradient;
use crate::systems::{
    AlgebraicObjective, DetAndNorm, EssentialSystem, FrobeniusToGt, Orthogonality, P3pSystem, ProjectionObjective,
    RegistrationObjective, RotationGeodesic, SymmetricEpipolar, UnitNorm, UpperLoss,
};

/// Tolerance of the Moore–Penrose identities (relative Frobenius).
pub const PINV_TOL: f64 = 1e-9;
/// Largest admissible entrywise error of an analytic Jacobian against central differences.
pub const SELF_CHECK_TOL: f64 = 1e-5;
/// Largest admissible relative disagreement between two analytic backward passes.
pub const CROSS_METHOD_TOL: f64 = 1e-4;
/// Admissible band for `err(delta) / err(delta / 2)` of the first-order prediction.
pub const PREDICTION_RATIO: (f64, f64) = (3.5, 4.5);
/// Perturbation sizes tried, relative to the RMS parameter magnitude.
const PREDICTION_SCALES: [f64; 9] = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6];
/// Largest fraction of instances a suite may exclude.
pub const MAX_EXCLUSION_RATE: f64 = 0.05;

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// `A A+ A = A`, `A+ A A+ = A+` and symmetry of `A A+`, `A+ A` on random
/// matrices up to 15x18, a third of them rank deficient.
pub fn moore_penrose(trials: usize, seed: u64) -> Check {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = rng_from_seed(derive_seed(seed, t as u64));
        let rows = rng.random_range(1..=15);
        let cols = rng.random_range(1..=18);
        let a = if t % 3 == 0 {
            let k = rng.random_range(1..=rows.min(cols));
            random_matrix(&mut rng, rows, k) * random_matrix(&mut rng, k, cols)
        } else {
            random_matrix(&mut rng, rows, cols)
        };
        let Ok(p) = pseudoinverse(&a, None) else {
            return Check::new("moore-penrose identities", false, format!("trial {t}: pseudoinverse failed"));
        };
        let ap = &a * &p;
        let pa = &p * &a;
        let errs = [
            relative_error(&(&ap * &a), &a),
            relative_error(&(&pa * &p), &p),
            relative_error(&ap, &ap.transpose()),
            relative_error(&pa, &pa.transpose()),
        ];
        worst = errs.iter().fold(worst, |m, e| m.max(*e));
    }
    Check::new("moore-penrose identities", worst < PINV_TOL, format!("{trials} matrices, max error {worst:.1e}"))
}

fn primary_method(problem: Problem) -> BackwardMethod {
    match problem {
        Problem::P3p | Problem::Essential => BackwardMethod::IftDirect,
        Problem::Registration | Problem::Fundamental => BackwardMethod::KktIft,
    }
}

/// Ratio `err(delta) / err(delta / 2)` of the first-order prediction
/// `x + dx/da delta` at the first scale where it falls in the admissible band,
/// or the last ratio seen. `None` if the root could not be tracked.
fn prediction_ratio(inst: &ProblemInstance, seed: u64) -> Result<Option<f64>, BackwardError> {
    let a = inst.params();
    let x = inst.solution()?;
    let dxda = solution_jacobian(primary_method(inst.problem()), inst, seed)?.dxdw;
    let mut rng = rng_from_seed(seed);
    let dir = DVector::from_fn(a.len(), |_, _| rng.random_range(-1.0..1.0));
    let dir = dir.normalize() * (a.norm() / (a.len() as f64).sqrt());
    let opts = FdOptions { max_jump: 1.0, ..FdOptions::default() };
    let err = |delta: &DVector<f64>| -> Result<f64, BackwardError> {
        let moved = tracked_solution(inst, &(&a + delta), &opts)?;
        Ok((moved - &x - &dxda * delta).norm())
    };
    let mut last = None;
    for s in PREDICTION_SCALES {
        let delta = &dir * s;
        let (Ok(full), Ok(half)) = (err(&delta), err(&(&delta * 0.5))) else { continue };
        let ratio = full / half;
        last = Some(ratio);
        if (PREDICTION_RATIO.0..=PREDICTION_RATIO.1).contains(&ratio) {
            break;
        }
    }
    Ok(last)
}

/// Halving the perturbation must divide the first-order prediction error by
/// about four on every problem, i.e. dx/da is the true derivative.
pub fn root_prediction(trials: usize, seed: u64) -> Check {
    let mut details = Vec::new();
    let mut pass = true;
    for problem in Problem::ALL {
        let (mut ok, mut excluded, mut worst) = (0usize, 0usize, None::<f64>);
        for t in 0..trials {
            let s = derive_seed(seed, t as u64);
            let Ok(inst) = random_instance(problem, s) else {
                excluded += 1;
                continue;
            };
            match prediction_ratio(&inst, s) {
                Ok(Some(r)) if (PREDICTION_RATIO.0..=PREDICTION_RATIO.1).contains(&r) => ok += 1,
                Ok(Some(r)) => worst = Some(r),
                Ok(None) | Err(BackwardError::TrackingFailure { .. } | BackwardError::DegenerateSpectrum { .. }) => {
                    excluded += 1
                }
                Err(_) => worst = Some(f64::NAN),
            }
        }
        let good = ok + excluded == trials && (excluded as f64) < MAX_EXCLUSION_RATE * trials as f64;
        pass &= good;
        details.push(format!("{} {ok}/{trials} ({excluded} excluded{})", problem.name(), match worst {
            Some(r) => format!(", outside band {r:.2}"),
            None => String::new(),
        }));
    }
    Check::new("quadratic root prediction", pass, details.join("; "))
}

fn random_dvec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// Every analytic constraint Jacobian and upper-loss gradient against central
/// differences at `points` random points per system.
pub fn jacobian_self_checks(points: usize, seed: u64) -> Check {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(entry) => entry.1 = entry.1.max(e),
        None => worst.push((name, e)),
    };
    for t in 0..points {
        let mut rng = rng_from_seed(derive_seed(seed, t as u64));
        let check = |sys: &dyn ConstraintSystem, x: &DVector<f64>, a: &DVector<f64>| self_check_system(sys, x, a).max_err();

        let a = random_dvec(&mut rng, 18, -1.0, 1.0) + DVector::from_fn(18, |i, _| if i >= 9 && i % 3 == 2 { 3.0 } else { 0.0 });
        record("p3p", check(&P3pSystem, &random_dvec(&mut rng, 3, 2.0, 8.0), &a));

        record("essential", check(&EssentialSystem, &random_dvec(&mut rng, 9, -1.0, 1.0), &random_dvec(&mut rng, 20, -1.0, 1.0)));

        let n = rng.random_range(3..10);
        let objective = RegistrationObjective {
            p: (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect(),
            q: (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect(),
        };
        let kkt = build_kkt(objective, Orthogonality).expect("registration node dimensions agree");
        record("registration kkt", check(&kkt, &random_dvec(&mut rng, 15, -1.0, 1.0), &random_dvec(&mut rng, n, 0.0, 1.0)));

        let scene = make_two_view(&SceneConfig { n_points: 10, seed: rng.random(), ..SceneConfig::default() })
            .expect("default scene is valid");
        let algebraic = build_kkt(AlgebraicObjective::new(&scene.instance.matches), UnitNorm).expect("dimensions agree");
        record("fundamental algebraic kkt", check(&algebraic, &random_dvec(&mut rng, 10, -1.0, 1.0), &random_dvec(&mut rng, 10, 0.0, 1.0)));
        let projection = build_kkt(ProjectionObjective, DetAndNorm).expect("dimensions agree");
        record("fundamental projection kkt", check(&projection, &random_dvec(&mut rng, 11, -1.0, 1.0), &random_dvec(&mut rng, 9, -1.0, 1.0)));

        // upper losses, away from the arccos endpoints
        let r_true = random_rotation(&mut rng);
        let r = random_rotation(&mut rng);
        let geo = RotationGeodesic { r_true };
        let cos = (geo.value(&r)).cos();
        if cos.abs() < 0.99 {
            record("rotation geodesic", upper_error(&geo, &r));
        }
        let m = nalgebra::Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        record("frobenius to gt", upper_error(&FrobeniusToGt::new(scene.e_gt), &m));
        let epi = SymmetricEpipolar::new(scene.instance.matches.clone(), (0..10).collect()).expect("valid inliers");
        if let Ok((_, g)) = epi.evaluate(&m) {
            let fd = fd_matrix_gradient(|x| epi.evaluate(x).map(|v| v.0).unwrap_or(f64::NAN), &m, 1e-6);
            record("symmetric epipolar", entry_error(&g, &fd));
        }
    }
    let max = worst.iter().fold(0.0f64, |m, (_, e)| if e.is_nan() { f64::INFINITY } else { m.max(*e) });
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Check::new("jacobian self-checks", max < SELF_CHECK_TOL, format!("{points} points each: {detail}"))
}

fn entry_error(analytic: &nalgebra::Matrix3<f64>, fd: &nalgebra::Matrix3<f64>) -> f64 {
    analytic.iter().zip(fd.iter()).map(|(a, f)| (a - f).abs() / (1.0 + f.abs())).fold(0.0, f64::max)
}

fn upper_error(loss: &dyn UpperLoss, m: &nalgebra::Matrix3<f64>) -> f64 {
    entry_error(&loss.grad(m), &fd_matrix_gradient(|x| loss.value(x), m, 1e-6))
}

/// Independent analytic backward passes of the same solution agree:
/// KKT vs closed-form SVD (registration, fundamental), LU vs pseudoinverse
/// IFT (P3P), and two random reductions of the 15x9 system (essential).
pub fn cross_method_agreement(trials: usize, seed: u64) -> Check {
    let mut details = Vec::new();
    let mut pass = true;
    for problem in Problem::ALL {
        let (mut worst, mut excluded, mut failed) = (0.0f64, 0usize, 0usize);
        for t in 0..trials {
            let s = derive_seed(seed, t as u64);
            let Ok(inst) = random_instance(problem, s) else {
                excluded += 1;
                continue;
            };
            let pair = (|| -> Result<(Matrix, Matrix), BackwardError> {
                Ok(match &inst {
                    ProblemInstance::P3p { inst: p, x } => {
                        let (a, x) = (p.to_params(), DVector::from_column_slice(x.as_slice()));
                        (ift_jacobian(&P3pSystem, &x, &a, None)?.dxda, ift_jacobian_pinv(&P3pSystem, &x, &a, None)?.dxda)
                    }
                    ProblemInstance::Essential { .. } => (
                        solution_jacobian(BackwardMethod::IftDirect, &inst, s)?.dxdw,
                        solution_jacobian(BackwardMethod::IftDirect, &inst, s.wrapping_add(1))?.dxdw,
                    ),
                    _ => (
                        solution_jacobian(BackwardMethod::KktIft, &inst, s)?.dxdw,
                        solution_jacobian(BackwardMethod::SvdClosedForm, &inst, s)?.dxdw,
                    ),
                })
            })();
            match pair {
                Ok((a, b)) => worst = worst.max(relative_error(&a, &b)),
                Err(BackwardError::DegenerateSpectrum { .. }) => excluded += 1,
                Err(_) => failed += 1,
            }
        }
        let good = failed == 0 && worst < CROSS_METHOD_TOL && (excluded as f64) < MAX_EXCLUSION_RATE * trials as f64;
        pass &= good;
        details.push(format!("{} {worst:.1e} ({excluded} excluded, {failed} failed)", problem.name()));
    }
    Check::new("cross-method agreement", pass, details.join("; "))
}

/// Columns of `a` and `b` other than timings are bit-identical.
pub fn same_non_timing(a: &RunReport, b: &RunReport) -> bool {
    if a.columns != b.columns || a.rows.len() != b.rows.len() {
        return false;
    }
    let keep: Vec<usize> = (0..a.columns.len()).filter(|&i| !a.columns[i].ends_with("_ms")).collect();
    a.rows.iter().zip(&b.rows).all(|(ra, rb)| keep.iter().all(|&i| ra[i] == rb[i]))
}

/// Gradient checks, toys and the essential benchmark repeat bit-identically
/// under a fixed seed, and the parallel gradient check matches the sequential one.
pub fn determinism(seed: u64) -> Check {
    let gc = |exec| gradcheck(Problem::Essential, &GradcheckOptions { trials: 24, seed, exec, ..GradcheckOptions::default() });
    let gc_ok = same_non_timing(&gc(Exec::Sequential), &gc(Exec::Parallel));
    let toy = || {
        let cfg = RegistrationToyConfig { seed, ..RegistrationToyConfig::default() };
        toy_registration(&cfg, &ToyOptions { iters: 10, seed, ..ToyOptions::registration() })
    };
    let toy_ok = match (toy(), toy()) {
        (Ok(a), Ok(b)) => same_non_timing(&a, &b),
        _ => false,
    };
    let bench = || bench_essential(&BenchOptions { trials: 100, seed, with_fd: false });
    let bench_ok = same_non_timing(&bench(), &bench());
    Check::new(
        "determinism",
        gc_ok && toy_ok && bench_ok,
        format!("gradcheck seq/par {gc_ok}, toy {toy_ok}, bench {bench_ok}"),
    )
}

/// The 5-point solver recovers `E_gt` from noiseless samples and every
/// candidate satisfies all 15 equations.
pub fn essential_recovery(trials: usize, seed: u64) -> Check {
    let (mut recovered, mut worst_dist, mut worst_res) = (0usize, 0.0f64, 0.0f64);
    for t in 0..trials {
        let Ok(scene) = make_two_view(&SceneConfig { n_points: 5, seed: derive_seed(seed, t as u64), ..SceneConfig::default() })
        else {
            continue;
        };
        let sample = &scene.instance.matches;
        let Ok(cands) = solve_essential_5pt(sample) else { continue };
        let params = pack_matches(sample);
        for c in &cands.candidates {
            worst_res = worst_res.max(EssentialSystem.eval(&mat3_to_vec(c), &params).amax());
        }
        let dist = cands.candidates.iter().map(|c| sign_folded_distance(c, &scene.e_gt)).fold(f64::INFINITY, f64::min);
        if dist < 1e-6 {
            recovered += 1;
        }
        worst_dist = worst_dist.max(dist);
    }
    Check::new(
        "5-point recovery",
        recovered == trials && worst_res <= 1e-6,
        format!("{recovered}/{trials} recovered (max distance {worst_dist:.1e}), max residual {worst_res:.1e}"),
    )
}

/// Weighted Kabsch output is a proper rotation.
pub fn kabsch_so3(trials: usize, seed: u64) -> Check {
    let mut worst = 0.0f64;
    let mut failed = 0usize;
    for t in 0..trials {
        let mut rng = rng_from_seed(derive_seed(seed, t as u64));
        let r_true = random_rotation(&mut rng);
        let n = rng.random_range(3..20);
        let p: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let noise = rng.random_range(0.0..0.5);
        let q = p.iter().map(|x| r_true * x + Vector3::from_fn(|_, _| rng.random_range(-noise..=noise))).collect();
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.01..1.0));
        match solve_kabsch(&RegistrationInstance { p, q, w, r_true }) {
            Ok(r) => {
                let ortho = (r.transpose() * r - nalgebra::Matrix3::identity()).amax();
                worst = worst.max(ortho).max((r.determinant() - 1.0).abs());
            }
            Err(_) => failed += 1,
        }
    }
    Check::new("kabsch in SO(3)", failed == 0 && worst <= 1e-10, format!("{trials} trials, max deviation {worst:.1e}, {failed} failed"))
}

/// Solver contracts at full size.
pub fn solver_contracts(seed: u64) -> Vec<Check> {
    vec![essential_recovery(1000, seed), kabsch_so3(1000, seed)]
}

/// The property suites at full size.
pub fn property_suite(seed: u64) -> Vec<Check> {
    vec![
        moore_penrose(200, seed),
        root_prediction(100, seed),
        jacobian_self_checks(100, seed),
        cross_method_agreement(100, seed),
        determinism(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for c in [moore_penrose(20, 1), jacobian_self_checks(5, 1), cross_method_agreement(5, 1), kabsch_so3(20, 1)] {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn non_timing_comparison_ignores_timings() {
        let mut a = RunReport::new(["x", "t_ms"]);
        a.push(vec![1usize.into(), 0.5.into()]);
        let mut b = a.clone();
        b.rows[0][1] = 0.7.into();
        assert!(same_non_timing(&a, &b));
        b.rows[0][0] = 2usize.into();
        assert!(!same_non_timing(&a, &b));
    }
}
