//! Backward passes: Jacobians of solver outputs with respect to their inputs
//! and the chain rule with an upper-level loss gradient.
//!
//! Every method produces a solution Jacobian `dx/dw` (`n_x x n_w`, with model
//! matrices flattened row-major); the parameter gradient is `(dx/dw)^T dJ/dx`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{mat3_to_vec, Match};
use crate::ift::IftError;
use crate::numerics::{Matrix, NumericsError};
use crate::solvers::{EpipolarInstance, P3pInstance, RegistrationInstance, SolverError};
use crate::systems::ReductionError;

pub mod essential;
pub mod fd;
pub mod fundamental;
pub mod p3p;
pub mod registration;

pub use essential::{backward_essential, backward_essential_batch, essential_jacobian, EssentialItem};
pub use fd::{fd_oracle, fd_track, FdOptions};
pub use fundamental::{backward_fundamental_kkt, backward_fundamental_svd, fundamental_jacobian_kkt, fundamental_jacobian_svd};
pub use p3p::{backward_p3p, p3p_jacobian};
pub use registration::{
    backward_registration_kkt, backward_registration_svd, registration_jacobian_kkt, registration_jacobian_svd,
};

/// Spectral gap below which the closed-form SVD derivatives are refused.
pub const SPECTRUM_GAP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Problem {
    P3p,
    Registration,
    Fundamental,
    Essential,
}

impl Problem {
    pub const ALL: [Problem; 4] = [Problem::P3p, Problem::Registration, Problem::Fundamental, Problem::Essential];

    pub fn name(self) -> &'static str {
        match self {
            Problem::P3p => "p3p",
            Problem::Registration => "registration",
            Problem::Fundamental => "fundamental",
            Problem::Essential => "essential",
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Problem::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown problem '{s}' (expected p3p, registration, fundamental or essential)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackwardMethod {
    IftDirect,
    KktIft,
    SvdClosedForm,
    FiniteDifference,
}

impl BackwardMethod {
    pub const ALL: [BackwardMethod; 4] = [
        BackwardMethod::IftDirect,
        BackwardMethod::KktIft,
        BackwardMethod::SvdClosedForm,
        BackwardMethod::FiniteDifference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackwardMethod::IftDirect => "ift",
            BackwardMethod::KktIft => "kkt",
            BackwardMethod::SvdClosedForm => "svd",
            BackwardMethod::FiniteDifference => "fd",
        }
    }

    pub fn applicability(self) -> &'static [Problem] {
        match self {
            BackwardMethod::IftDirect => &[Problem::P3p, Problem::Essential],
            BackwardMethod::KktIft => &[Problem::Registration, Problem::Fundamental],
            BackwardMethod::SvdClosedForm => &[Problem::Registration, Problem::Fundamental],
            BackwardMethod::FiniteDifference => &Problem::ALL,
        }
    }

    pub fn applies_to(self, problem: Problem) -> bool {
        self.applicability().contains(&problem)
    }
}

impl fmt::Display for BackwardMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackwardMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ift" | "ift-direct" => Ok(BackwardMethod::IftDirect),
            "kkt" | "kkt-ift" | "ddn" => Ok(BackwardMethod::KktIft),
            "svd" | "svd-closed-form" => Ok(BackwardMethod::SvdClosedForm),
            "fd" | "finite-difference" => Ok(BackwardMethod::FiniteDifference),
            _ => Err(format!("unknown backward method '{s}' (expected ift, kkt, svd or fd)")),
        }
    }
}

#[derive(Debug, Error, Clone)]
pub enum BackwardError {
    #[error("{method} does not apply to {problem}")]
    NotApplicable { method: BackwardMethod, problem: Problem },
    #[error("point is not a root: residual {residual:e}")]
    NotARoot { residual: f64 },
    #[error("solution jacobian is rank deficient (rank {rank} < {expected})")]
    RankDeficient { rank: usize, expected: usize },
    #[error("singular values coincide (gap {gap:e})")]
    DegenerateSpectrum { gap: f64 },
    #[error("root tracking failed for parameter {param}: {reason}")]
    TrackingFailure { param: usize, reason: String },
    #[error("upper gradient has {got} entries, expected {expected}")]
    GradientShape { got: usize, expected: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<IftError> for BackwardError {
    fn from(e: IftError) -> Self {
        match e {
            IftError::NotARoot { residual, .. } => BackwardError::NotARoot { residual },
            IftError::RankDeficient { rank, expected, .. } => BackwardError::RankDeficient { rank, expected },
            IftError::Numerics(n) => BackwardError::Numerics(n),
            IftError::DimensionMismatch(m) => BackwardError::Numerics(NumericsError::DimensionMismatch(m)),
        }
    }
}

impl From<ReductionError> for BackwardError {
    fn from(e: ReductionError) -> Self {
        match e {
            ReductionError::RankDeficient { rank, .. } => BackwardError::RankDeficient { rank, expected: 9 },
            ReductionError::WrongShape(n) => {
                BackwardError::Numerics(NumericsError::DimensionMismatch(format!("{n} rows")))
            }
            ReductionError::Numerics(n) => BackwardError::Numerics(n),
        }
    }
}

pub type Result<T> = std::result::Result<T, BackwardError>;

/// Gradient of the upper loss with respect to the parameters, plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub dj_dw: DVector<f64>,
    /// Seconds spent in the backward pass.
    pub wall_time: f64,
    /// Rank failures that survived all retries.
    pub rank_failures: usize,
    pub fallback_used: bool,
}

impl GradientReport {
    pub fn zero(n: usize, wall_time: f64, rank_failures: usize) -> Self {
        Self { dj_dw: DVector::zeros(n), wall_time, rank_failures, fallback_used: true }
    }
}

/// What to do when a single backward pass hits an unrecoverable rank failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FallbackPolicy {
    /// Propagate the error.
    #[default]
    Raise,
    /// Report a zero gradient with `fallback_used` set.
    ZeroGradient,
}

/// `(dx/dw)^T g`
pub fn chain(dxdw: &Matrix, upper: &DVector<f64>) -> Result<DVector<f64>> {
    if upper.len() != dxdw.nrows() {
        return Err(BackwardError::GradientShape { got: upper.len(), expected: dxdw.nrows() });
    }
    Ok(dxdw.tr_mul(upper))
}

pub(crate) fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// A problem instance at which a solution Jacobian can be evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemInstance {
    /// Depths `x` tracked among the solver's roots.
    P3p { inst: P3pInstance, x: Vector3<f64> },
    /// Differentiated with respect to the weights.
    Registration { inst: RegistrationInstance },
    /// Differentiated with respect to the weights.
    Fundamental { inst: EpipolarInstance },
    /// Candidate `e` of the 5-point solver, differentiated with respect to the
    /// 20 match coordinates.
    Essential { sample: Vec<Match>, e: Matrix3<f64> },
}

impl ProblemInstance {
    pub fn problem(&self) -> Problem {
        match self {
            ProblemInstance::P3p { .. } => Problem::P3p,
            ProblemInstance::Registration { .. } => Problem::Registration,
            ProblemInstance::Fundamental { .. } => Problem::Fundamental,
            ProblemInstance::Essential { .. } => Problem::Essential,
        }
    }

    /// Parameters the Jacobian is taken with respect to.
    pub fn params(&self) -> DVector<f64> {
        match self {
            ProblemInstance::P3p { inst, .. } => inst.to_params(),
            ProblemInstance::Registration { inst } => inst.w.clone(),
            ProblemInstance::Fundamental { inst } => inst.w.clone(),
            ProblemInstance::Essential { sample, .. } => crate::geometry::pack_matches(sample),
        }
    }

    /// The solution whose Jacobian is computed.
    pub fn solution(&self) -> Result<DVector<f64>> {
        Ok(match self {
            ProblemInstance::P3p { x, .. } => DVector::from_column_slice(x.as_slice()),
            ProblemInstance::Registration { inst } => mat3_to_vec(&crate::solvers::solve_kabsch(inst)?),
            ProblemInstance::Fundamental { inst } => mat3_to_vec(&crate::solvers::solve_fundamental_8pt(inst)?.f),
            ProblemInstance::Essential { e, .. } => mat3_to_vec(e),
        })
    }
}

/// Solution Jacobian and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    pub dxdw: Matrix,
    pub wall_time: f64,
    pub rank_failures: usize,
    pub fallback_used: bool,
}

/// Solution Jacobian of `instance` by `method`. `seed` drives the random
/// combination coefficients of the essential reduction.
pub fn solution_jacobian(method: BackwardMethod, instance: &ProblemInstance, seed: u64) -> Result<JacobianReport> {
    let problem = instance.problem();
    if !method.applies_to(problem) {
        return Err(BackwardError::NotApplicable { method, problem });
    }
    let start = Instant::now();
    let dxdw = match (method, instance) {
        (BackwardMethod::FiniteDifference, _) => fd_oracle(instance, &FdOptions::default())?,
        (BackwardMethod::IftDirect, ProblemInstance::P3p { inst, x }) => p3p_jacobian(x, inst)?,
        (BackwardMethod::IftDirect, ProblemInstance::Essential { sample, e }) => {
            let mut rng = crate::synthetic::rng_from_seed(seed);
            essential_jacobian(e, sample, &mut rng, essential::MAX_RETRIES)?.dxdw
        }
        (BackwardMethod::KktIft, ProblemInstance::Registration { inst }) => {
            registration_jacobian_kkt(&crate::solvers::solve_kabsch(inst)?, inst)?
        }
        (BackwardMethod::SvdClosedForm, ProblemInstance::Registration { inst }) => registration_jacobian_svd(inst)?,
        (BackwardMethod::KktIft, ProblemInstance::Fundamental { inst }) => {
            fundamental_jacobian_kkt(&crate::solvers::solve_fundamental_8pt(inst)?, inst)?
        }
        (BackwardMethod::SvdClosedForm, ProblemInstance::Fundamental { inst }) => {
            fundamental_jacobian_svd(&crate::solvers::solve_fundamental_8pt(inst)?, inst)?
        }
        _ => unreachable!("applicability checked above"),
    };
    Ok(JacobianReport { dxdw, wall_time: elapsed(start), rank_failures: 0, fallback_used: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn applicability_table() {
        use BackwardMethod::*;
        use Problem::*;
        assert!(SvdClosedForm.applies_to(Registration) && SvdClosedForm.applies_to(Fundamental));
        assert!(!SvdClosedForm.applies_to(P3p) && !SvdClosedForm.applies_to(Essential));
        assert!(IftDirect.applies_to(P3p) && IftDirect.applies_to(Essential));
        assert!(!IftDirect.applies_to(Registration));
        assert!(KktIft.applies_to(Registration) && KktIft.applies_to(Fundamental) && !KktIft.applies_to(Essential));
        assert!(Problem::ALL.iter().all(|&p| FiniteDifference.applies_to(p)));
    }

    #[test]
    fn names_round_trip() {
        for m in BackwardMethod::ALL {
            assert_eq!(m.name().parse::<BackwardMethod>().unwrap(), m);
        }
        for p in Problem::ALL {
            assert_eq!(p.name().parse::<Problem>().unwrap(), p);
        }
        assert!("nope".parse::<BackwardMethod>().is_err());
    }

    #[test]
    fn chain_rule_shapes() {
        let j = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = chain(&j, &DVector::from_vec(vec![1.0, -1.0])).unwrap();
        assert_eq!(g.as_slice(), &[-3.0, -3.0, -3.0]);
        assert!(chain(&j, &DVector::zeros(3)).is_err());
        assert_eq!(chain(&j, &DVector::zeros(2)).unwrap(), DVector::zeros(3));
    }
}
