pub mod geometry;
pub mod ift;
pub mod numerics;
pub mod solvers;
pub mod systems;
pub mod synthetic;
pub mod backward;
pub mod parallel;
pub mod properties;
pub mod experiments;
pub mod report;
