//! Essential matrix from five matches: `dE/dm` from the reduced 9x9 system.

use std::time::Instant;

use nalgebra::Matrix3;
use rand::Rng;

use crate::backward::{chain, elapsed, BackwardError, FallbackPolicy, GradientReport, Result};
use crate::geometry::{mat3_to_vec, pack_matches, Match};
use crate::ift::{jacobian_from_parts, ConstraintSystem, ROOT_TOL};
use crate::numerics::Matrix;
use crate::parallel::{map_indexed, Exec};
use crate::synthetic::rng_from_seed;
use crate::systems::essential::{apply_reduction, reduce_essential_jacobian, Combination};
use crate::systems::EssentialSystem;

/// Attempts at drawing a full-rank combination of the trace rows.
pub const MAX_RETRIES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialJacobian {
    /// `dE/dm` (`9 x 20`), `m` the packed match coordinates.
    pub dxdw: Matrix,
    pub combination: Combination,
    pub attempts: usize,
}

pub fn essential_jacobian<R: Rng + ?Sized>(
    e: &Matrix3<f64>,
    sample: &[Match],
    rng: &mut R,
    max_retries: usize,
) -> Result<EssentialJacobian> {
    let x = mat3_to_vec(e);
    let a = pack_matches(sample);
    let sys = EssentialSystem;
    if a.len() != sys.n_a() {
        return Err(BackwardError::GradientShape { got: sample.len(), expected: 5 });
    }
    let residual = sys.eval(&x, &a).amax();
    if !(residual < ROOT_TOL) {
        return Err(BackwardError::NotARoot { residual });
    }
    let reduced = reduce_essential_jacobian(&sys.jac_x(&x, &a), rng, max_retries)?;
    let ja = apply_reduction(&sys.jac_a(&x, &a), &reduced.combination);
    let sol = jacobian_from_parts(&reduced.jx, &ja, None, false)?;
    Ok(EssentialJacobian { dxdw: sol.dxda, combination: reduced.combination, attempts: reduced.attempts })
}

/// `dJ/dm` for a single selected candidate.
pub fn backward_essential<R: Rng + ?Sized>(
    e: &Matrix3<f64>,
    sample: &[Match],
    dj_de: &Matrix3<f64>,
    rng: &mut R,
    policy: FallbackPolicy,
) -> Result<GradientReport> {
    let start = Instant::now();
    match essential_jacobian(e, sample, rng, MAX_RETRIES) {
        Ok(j) => {
            let dj_dw = chain(&j.dxdw, &mat3_to_vec(dj_de))?;
            Ok(GradientReport { dj_dw, wall_time: elapsed(start), rank_failures: 0, fallback_used: false })
        }
        Err(BackwardError::RankDeficient { .. }) if policy == FallbackPolicy::ZeroGradient => {
            Ok(GradientReport::zero(20, elapsed(start), 1))
        }
        Err(err) => Err(err),
    }
}

/// One member of a batched backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EssentialItem {
    pub sample: Vec<Match>,
    pub e: Matrix3<f64>,
    pub dj_de: Matrix3<f64>,
    /// Seed of this member's combination coefficients.
    pub seed: u64,
}

/// Backward pass over a batch. Members whose reduced Jacobian stays rank
/// deficient borrow the Jacobian of a randomly chosen full-rank member
/// (`batch_seed` drives the choice); with no full-rank member they get a zero
/// gradient. Other errors are returned per member.
pub fn backward_essential_batch(items: &[EssentialItem], batch_seed: u64, exec: Exec) -> Vec<Result<GradientReport>> {
    let jacobians: Vec<(Result<EssentialJacobian>, f64)> = map_indexed(exec, items.len(), |i| {
        let start = Instant::now();
        let item = &items[i];
        let mut rng = rng_from_seed(item.seed);
        let j = essential_jacobian(&item.e, &item.sample, &mut rng, MAX_RETRIES);
        (j, elapsed(start))
    });
    let pool: Vec<usize> = jacobians.iter().enumerate().filter(|(_, (j, _))| j.is_ok()).map(|(i, _)| i).collect();
    let mut pick = rng_from_seed(batch_seed);

    let mut out = Vec::with_capacity(items.len());
    for (item, (j, time)) in items.iter().zip(&jacobians) {
        let g = mat3_to_vec(&item.dj_de);
        out.push(match j {
            Ok(j) => chain(&j.dxdw, &g).map(|dj_dw| GradientReport {
                dj_dw,
                wall_time: *time,
                rank_failures: 0,
                fallback_used: false,
            }),
            Err(BackwardError::RankDeficient { .. }) => {
                if pool.is_empty() {
                    Ok(GradientReport::zero(20, *time, 1))
                } else {
                    let donor = pool[pick.random_range(0..pool.len())];
                    let dxdw = &jacobians[donor].0.as_ref().expect("pool holds successes").dxdw;
                    chain(dxdw, &g).map(|dj_dw| GradientReport { dj_dw, wall_time: *time, rank_failures: 1, fallback_used: true })
                }
            }
            Err(e) => Err(e.clone()),
        });
    }
    out
}
