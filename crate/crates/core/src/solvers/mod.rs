//! Forward minimal-problem solvers and ground-truth-closest model selection.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::sign_folded_distance;
use crate::numerics::NumericsError;

pub mod essential;
pub mod fundamental;
pub mod kabsch;
pub mod p3p;

pub use essential::solve_essential_5pt;
pub use fundamental::{solve_fundamental_8pt, EpipolarInstance, FundamentalEstimate};
pub use kabsch::{kabsch_decomposition, solve_kabsch, KabschDecomposition, RegistrationInstance};
pub use p3p::{solve_p3p, P3pInstance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no real solution")]
    NoRealSolution,
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// Unit-norm model matrices returned by a solver, plus the index of the one
/// closest to a reference once [`ModelCandidateSet::select`] has run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelCandidateSet {
    pub candidates: Vec<Matrix3<f64>>,
    pub selected_index: Option<usize>,
    pub selection_distance: Option<f64>,
}

impl ModelCandidateSet {
    pub fn new(candidates: Vec<Matrix3<f64>>) -> Self {
        Self { candidates, selected_index: None, selection_distance: None }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Records the ground-truth-closest candidate and returns it.
    pub fn select(&mut self, gt: &Matrix3<f64>) -> Result<Matrix3<f64>> {
        let (idx, dist) = closest_index(&self.candidates, gt)?;
        self.selected_index = Some(idx);
        self.selection_distance = Some(dist);
        Ok(self.candidates[idx])
    }
}

/// Candidate minimising `min(||M - gt||, ||M + gt||)`; the lowest index wins ties.
pub fn select_closest(cands: &ModelCandidateSet, gt: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    closest_index(&cands.candidates, gt).map(|(i, _)| cands.candidates[i])
}

pub fn closest_index(cands: &[Matrix3<f64>], gt: &Matrix3<f64>) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cands.iter().enumerate() {
        let d = sign_folded_distance(c, gt);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.ok_or(SolverError::EmptyCandidates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(seed: f64) -> Matrix3<f64> {
        let raw = Matrix3::from_fn(|r, c| ((r * 3 + c) as f64 * seed).sin());
        raw / raw.norm()
    }

    #[test]
    fn selection_rules() {
        let gt = m(1.3);
        let other = m(0.7);
        assert_eq!(select_closest(&ModelCandidateSet::new(vec![other]), &gt).unwrap(), other);
        assert_eq!(select_closest(&ModelCandidateSet::new(vec![other, gt]), &gt).unwrap(), gt);

        let mut set = ModelCandidateSet::new(vec![other, -gt]);
        assert_eq!(set.select(&gt).unwrap(), -gt);
        assert_eq!(set.selected_index, Some(1));
        assert_eq!(set.selection_distance, Some(0.0));

        assert_eq!(
            select_closest(&ModelCandidateSet::default(), &gt),
            Err(SolverError::EmptyCandidates)
        );
    }

    #[test]
    fn selection_invariant_to_sign_and_order() {
        let gt = m(1.3);
        let cands = vec![m(0.2), m(1.25), m(3.1)];
        let base = select_closest(&ModelCandidateSet::new(cands.clone()), &gt).unwrap();
        let flipped: Vec<_> = cands.iter().map(|c| -c).collect();
        let got = select_closest(&ModelCandidateSet::new(flipped), &gt).unwrap();
        assert_eq!(got, -base);
        let mut rev = cands.clone();
        rev.reverse();
        assert_eq!(select_closest(&ModelCandidateSet::new(rev), &gt).unwrap(), base);
    }
}
