//! Derivatives of polynomial-system roots with respect to their parameters.
//!
//! Given `h(x, a) = 0` at a simple root `x`, the solution map satisfies
//! `dx/da = -(dh/dx)^+ (dh/da)`. [`ift_jacobian`] evaluates that formula for
//! any [`ConstraintSystem`]; [`build_kkt`] turns a constrained minimisation
//! (low-level loss plus equality constraints) into such a system so that the
//! same routine differentiates declarative nodes.

use nalgebra::DVector;
use thiserror::Error;

use crate::numerics::{self, Matrix, NumericsError};

/// Residual bound a point must meet to be accepted as a root.
pub const ROOT_TOL: f64 = 1e-6;
/// Step used by [`self_check_system`].
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone)]
pub enum IftError {
    #[error("point is not a root: residual {residual:e} exceeds {tol:e}")]
    NotARoot { residual: f64, tol: f64 },
    #[error("jacobian w.r.t. the solution has rank {rank} < {expected}")]
    RankDeficient {
        rank: usize,
        expected: usize,
        /// Pseudoinverse-based Jacobian, returned so callers can decide on a fallback.
        jacobian: Box<SolutionJacobian>,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, IftError>;

/// A system of `n_eq` equations `h(x, a) = 0` in `n_x` unknowns and `n_a` parameters.
pub trait ConstraintSystem {
    fn n_x(&self) -> usize;
    fn n_a(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn eval(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64>;
    /// `n_eq x n_x`
    fn jac_x(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix;
    /// `n_eq x n_a`
    fn jac_a(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix;
}

impl<S: ConstraintSystem + ?Sized> ConstraintSystem for &S {
    fn n_x(&self) -> usize {
        (**self).n_x()
    }
    fn n_a(&self) -> usize {
        (**self).n_a()
    }
    fn n_eq(&self) -> usize {
        (**self).n_eq()
    }
    fn eval(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        (**self).eval(x, a)
    }
    fn jac_x(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix {
        (**self).jac_x(x, a)
    }
    fn jac_a(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix {
        (**self).jac_a(x, a)
    }
}

type VecFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> Matrix + Send + Sync>;

/// Constraint system assembled from closures; handy for small ad-hoc systems.
pub struct FnSystem {
    pub n_x: usize,
    pub n_a: usize,
    pub n_eq: usize,
    eval: VecFn,
    jac_x: MatFn,
    jac_a: MatFn,
}

impl FnSystem {
    pub fn new(
        n_x: usize,
        n_a: usize,
        n_eq: usize,
        eval: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jac_x: impl Fn(&DVector<f64>, &DVector<f64>) -> Matrix + Send + Sync + 'static,
        jac_a: impl Fn(&DVector<f64>, &DVector<f64>) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        Self {
            n_x,
            n_a,
            n_eq,
            eval: Box::new(eval),
            jac_x: Box::new(jac_x),
            jac_a: Box::new(jac_a),
        }
    }
}

impl ConstraintSystem for FnSystem {
    fn n_x(&self) -> usize {
        self.n_x
    }
    fn n_a(&self) -> usize {
        self.n_a
    }
    fn n_eq(&self) -> usize {
        self.n_eq
    }
    fn eval(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        (self.eval)(x, a)
    }
    fn jac_x(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix {
        (self.jac_x)(x, a)
    }
    fn jac_a(&self, x: &DVector<f64>, a: &DVector<f64>) -> Matrix {
        (self.jac_a)(x, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMethod {
    SquareInverse,
    Pseudoinverse,
}

/// `dx/da` (`n_x x n_a`) together with the conditioning of `dh/dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionJacobian {
    pub dxda: Matrix,
    pub rank_jx: usize,
    pub sigma_min: f64,
    pub method: InversionMethod,
}

/// Implicit-function-theorem Jacobian of the root `x` of `sys` at parameters `a`.
///
/// Square full-rank systems are solved by LU; everything else goes through the
/// pseudoinverse. `rank_tol = None` uses the default SVD tolerance.
pub fn ift_jacobian<S: ConstraintSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    a: &DVector<f64>,
    rank_tol: Option<f64>,
) -> Result<SolutionJacobian> {
    let (jx, ja) = checked_jacobians(sys, x, a)?;
    jacobian_from_parts(&jx, &ja, rank_tol, false)
}

/// Same as [`ift_jacobian`] but always inverts through the pseudoinverse.
pub fn ift_jacobian_pinv<S: ConstraintSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    a: &DVector<f64>,
    rank_tol: Option<f64>,
) -> Result<SolutionJacobian> {
    let (jx, ja) = checked_jacobians(sys, x, a)?;
    jacobian_from_parts(&jx, &ja, rank_tol, true)
}

fn checked_jacobians<S: ConstraintSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    a: &DVector<f64>,
) -> Result<(Matrix, Matrix)> {
    if x.len() != sys.n_x() || a.len() != sys.n_a() {
        return Err(IftError::DimensionMismatch(format!(
            "x has {} entries (expected {}), a has {} (expected {})",
            x.len(),
            sys.n_x(),
            a.len(),
            sys.n_a()
        )));
    }
    let residual = sys.eval(x, a).amax();
    if !(residual < ROOT_TOL) {
        return Err(IftError::NotARoot { residual, tol: ROOT_TOL });
    }
    Ok((sys.jac_x(x, a), sys.jac_a(x, a)))
}

/// `-(jx)^+ ja` from already evaluated Jacobians.
pub fn jacobian_from_parts(
    jx: &Matrix,
    ja: &Matrix,
    rank_tol: Option<f64>,
    force_pinv: bool,
) -> Result<SolutionJacobian> {
    if jx.nrows() != ja.nrows() {
        return Err(IftError::DimensionMismatch(format!(
            "jac_x has {} rows, jac_a has {}",
            jx.nrows(),
            ja.nrows()
        )));
    }
    let n = jx.ncols();
    let dec = numerics::svd(jx)?;
    numerics::ensure_finite(ja)?;
    let rank = numerics::rank_from_svd(jx.nrows(), n, &dec, rank_tol);
    let sigma_min = if dec.sigma.len() < n { 0.0 } else { dec.sigma_min() };

    if !force_pinv && rank == n && jx.nrows() == n {
        if let Some(sol) = numerics::solve_square(jx, ja) {
            return Ok(SolutionJacobian {
                dxda: -sol,
                rank_jx: rank,
                sigma_min,
                method: InversionMethod::SquareInverse,
            });
        }
    }
    let pinv = numerics::pseudoinverse_from_svd(jx.nrows(), n, &dec, rank_tol);
    let out = SolutionJacobian {
        dxda: -(pinv * ja),
        rank_jx: rank,
        sigma_min,
        method: InversionMethod::Pseudoinverse,
    };
    if rank < n {
        return Err(IftError::RankDeficient { rank, expected: n, jacobian: Box::new(out) });
    }
    Ok(out)
}

/// Maximum relative deviation of the analytic Jacobians from central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianCheck {
    pub max_err_x: f64,
    pub max_err_a: f64,
}

impl JacobianCheck {
    pub fn max_err(&self) -> f64 {
        self.max_err_x.max(self.max_err_a)
    }
}

/// Compares `jac_x` and `jac_a` entrywise against central differences of `eval`
/// (step [`FD_STEP`]) using `|analytic - fd| / (1 + |fd|)`.
pub fn self_check_system<S: ConstraintSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    a: &DVector<f64>,
) -> JacobianCheck {
    let fd_x = central_jacobian(|xx| sys.eval(xx, a), x, FD_STEP);
    let fd_a = central_jacobian(|aa| sys.eval(x, aa), a, FD_STEP);
    JacobianCheck {
        max_err_x: max_rel_entry_error(&sys.jac_x(x, a), &fd_x),
        max_err_a: max_rel_entry_error(&sys.jac_a(x, a), &fd_a),
    }
}

pub(crate) fn central_jacobian(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    at: &DVector<f64>,
    step: f64,
) -> Matrix {
    let rows = f(at).len();
    let mut out = Matrix::zeros(rows, at.len());
    for j in 0..at.len() {
        let mut plus = at.clone();
        let mut minus = at.clone();
        plus[j] += step;
        minus[j] -= step;
        let col = (f(&plus) - f(&minus)) / (2.0 * step);
        out.set_column(j, &col);
    }
    out
}

pub(crate) fn max_rel_entry_error(analytic: &Matrix, fd: &Matrix) -> f64 {
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(an, f)| (an - f).abs() / (1.0 + f.abs()))
        .fold(0.0, f64::max)
}

/// Twice-differentiable low-level loss `f(y, w)` of a declarative node.
pub trait LowLevelObjective {
    fn n_y(&self) -> usize;
    fn n_w(&self) -> usize;
    fn value(&self, y: &DVector<f64>, w: &DVector<f64>) -> f64;
    fn grad_y(&self, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
    /// `n_y x n_y`
    fn hess_yy(&self, y: &DVector<f64>, w: &DVector<f64>) -> Matrix;
    /// `n_y x n_w`, entry `(i, j)` is `d^2 f / dy_i dw_j`.
    fn hess_yw(&self, y: &DVector<f64>, w: &DVector<f64>) -> Matrix;
}

/// Parameter-free equality constraints `h(y) = 0`.
pub trait EqualityConstraints {
    fn n_y(&self) -> usize;
    fn n_h(&self) -> usize;
    fn value(&self, y: &DVector<f64>) -> DVector<f64>;
    /// `n_h x n_y`
    fn jacobian(&self, y: &DVector<f64>) -> Matrix;
    /// One `n_y x n_y` Hessian per constraint.
    fn hessians(&self, y: &DVector<f64>) -> Vec<Matrix>;
}

/// The empty constraint set.
#[derive(Debug, Clone, Copy)]
pub struct Unconstrained(pub usize);

impl EqualityConstraints for Unconstrained {
    fn n_y(&self) -> usize {
        self.0
    }
    fn n_h(&self) -> usize {
        0
    }
    fn value(&self, _y: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn jacobian(&self, _y: &DVector<f64>) -> Matrix {
        Matrix::zeros(0, self.0)
    }
    fn hessians(&self, _y: &DVector<f64>) -> Vec<Matrix> {
        Vec::new()
    }
}

/// Optimality conditions of `min_y f(y, w) s.t. h(y) = 0` as a constraint
/// system in the unknowns `(y, lambda)` with parameters `w`:
///
/// ```text
/// df/dy + lambda^T dh/dy = 0      (n_y rows)
/// h(y)                   = 0      (n_lambda rows)
/// ```
#[derive(Debug, Clone)]
pub struct KktSystem<F, H> {
    pub objective: F,
    pub constraints: H,
    pub n_y: usize,
    pub n_lambda: usize,
}

pub fn build_kkt<F, H>(objective: F, constraints: H) -> Result<KktSystem<F, H>>
where
    F: LowLevelObjective,
    H: EqualityConstraints,
{
    if objective.n_y() != constraints.n_y() {
        return Err(IftError::DimensionMismatch(format!(
            "objective has {} unknowns, constraints have {}",
            objective.n_y(),
            constraints.n_y()
        )));
    }
    let n_y = objective.n_y();
    let n_lambda = constraints.n_h();
    Ok(KktSystem { objective, constraints, n_y, n_lambda })
}

impl<F: LowLevelObjective, H: EqualityConstraints> KktSystem<F, H> {
    /// Concatenates a primal point and its multipliers into the system's unknown vector.
    pub fn augment(&self, y: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_y + self.n_lambda);
        x.rows_mut(0, self.n_y).copy_from(y);
        x.rows_mut(self.n_y, self.n_lambda).copy_from(lambda);
        x
    }

    fn split<'a>(&self, x: &'a DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            x.rows(0, self.n_y).into_owned(),
            x.rows(self.n_y, self.n_lambda).into_owned(),
        )
    }

    /// Solves the full KKT Jacobian and keeps only the `dy/dw` block.
    pub fn primal_jacobian(
        &self,
        y: &DVector<f64>,
        w: &DVector<f64>,
        rank_tol: Option<f64>,
    ) -> Result<SolutionJacobian> {
        let lambda = recover_multipliers(self, y, w)?;
        let x = self.augment(y, &lambda);
        let mut jac = ift_jacobian(self, &x, w, rank_tol)?;
        jac.dxda = jac.dxda.rows(0, self.n_y).into_owned();
        Ok(jac)
    }
}

impl<F: LowLevelObjective, H: EqualityConstraints> ConstraintSystem for KktSystem<F, H> {
    fn n_x(&self) -> usize {
        self.n_y + self.n_lambda
    }
    fn n_a(&self) -> usize {
        self.objective.n_w()
    }
    fn n_eq(&self) -> usize {
        self.n_y + self.n_lambda
    }

    fn eval(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let (y, lambda) = self.split(x);
        let stationarity =
            self.objective.grad_y(&y, w) + self.constraints.jacobian(&y).transpose() * &lambda;
        let mut out = DVector::zeros(self.n_eq());
        out.rows_mut(0, self.n_y).copy_from(&stationarity);
        out.rows_mut(self.n_y, self.n_lambda).copy_from(&self.constraints.value(&y));
        out
    }

    fn jac_x(&self, x: &DVector<f64>, w: &DVector<f64>) -> Matrix {
        let (y, lambda) = self.split(x);
        let mut hess = self.objective.hess_yy(&y, w);
        for (l, h) in lambda.iter().zip(self.constraints.hessians(&y)) {
            hess += h * *l;
        }
        let jh = self.constraints.jacobian(&y);
        let n = self.n_eq();
        let mut out = Matrix::zeros(n, n);
        out.view_mut((0, 0), (self.n_y, self.n_y)).copy_from(&hess);
        out.view_mut((0, self.n_y), (self.n_y, self.n_lambda)).copy_from(&jh.transpose());
        out.view_mut((self.n_y, 0), (self.n_lambda, self.n_y)).copy_from(&jh);
        out
    }

    fn jac_a(&self, x: &DVector<f64>, w: &DVector<f64>) -> Matrix {
        let (y, _) = self.split(x);
        let mut out = Matrix::zeros(self.n_eq(), self.n_a());
        out.view_mut((0, 0), (self.n_y, self.n_a())).copy_from(&self.objective.hess_yw(&y, w));
        out
    }
}

/// Least-squares multipliers from the stationarity rows:
/// `(dh/dy)^T lambda = -(df/dy)^T`.
pub fn recover_multipliers<F, H>(kkt: &KktSystem<F, H>, y: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>>
where
    F: LowLevelObjective,
    H: EqualityConstraints,
{
    if kkt.n_lambda == 0 {
        return Ok(DVector::zeros(0));
    }
    let jh_t = kkt.constraints.jacobian(y).transpose();
    let dec = numerics::svd(&jh_t)?;
    let rank = numerics::rank_from_svd(jh_t.nrows(), jh_t.ncols(), &dec, None);
    let pinv = numerics::pseudoinverse_from_svd(jh_t.nrows(), jh_t.ncols(), &dec, None);
    let lambda = -(pinv * kkt.objective.grad_y(y, w));
    if rank < kkt.n_lambda {
        let dxda = Matrix::zeros(kkt.n_y, kkt.objective.n_w());
        return Err(IftError::RankDeficient {
            rank,
            expected: kkt.n_lambda,
            jacobian: Box::new(SolutionJacobian {
                dxda,
                rank_jx: rank,
                sigma_min: dec.sigma_min(),
                method: InversionMethod::Pseudoinverse,
            }),
        });
    }
    Ok(lambda)
}
