//! P3P depths: `dx/da` straight from the defining system.

use std::time::Instant;

use nalgebra::{DVector, Vector3};

use crate::backward::{chain, elapsed, GradientReport, Result};
use crate::ift::ift_jacobian;
use crate::numerics::Matrix;
use crate::solvers::P3pInstance;
use crate::systems::P3pSystem;

/// `dx/da` (`3 x 18`) at the root `x`.
pub fn p3p_jacobian(x: &Vector3<f64>, inst: &P3pInstance) -> Result<Matrix> {
    let x = DVector::from_column_slice(x.as_slice());
    Ok(ift_jacobian(&P3pSystem, &x, &inst.to_params(), None)?.dxda)
}

pub fn backward_p3p(x: &Vector3<f64>, inst: &P3pInstance, dj_dx: &Vector3<f64>) -> Result<GradientReport> {
    let start = Instant::now();
    let j = p3p_jacobian(x, inst)?;
    let dj_dw = chain(&j, &DVector::from_column_slice(dj_dx.as_slice()))?;
    Ok(GradientReport { dj_dw, wall_time: elapsed(start), rank_failures: 0, fallback_used: false })
}
