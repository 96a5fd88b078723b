//! Concrete constraint systems, low-level losses and upper losses.

pub mod essential;
pub mod fundamental;
pub mod losses;
pub mod p3p;
pub mod registration;

pub use essential::{essential_system, reduce_essential_jacobian, EssentialSystem, ReducedJacobian, ReductionError};
pub use fundamental::{fundamental_losses, AlgebraicObjective, DetAndNorm, FundamentalLosses, ProjectionObjective, UnitNorm};
pub use losses::{epipolar_upper_loss, FrobeniusToGt, LossError, RotationGeodesic, SymmetricEpipolar, UpperLoss, UpperLossKind};
pub use p3p::{p3p_system, P3pSystem};
pub use registration::{registration_losses, Orthogonality, RegistrationLosses, RegistrationObjective};
