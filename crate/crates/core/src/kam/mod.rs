//! Iterative construction of a quasi-periodic invariant torus.

pub mod anchor;
pub mod engine;
pub mod homological;
pub mod schedule;
pub mod step;

pub use anchor::{anchor_frequency, AnchorResult};
pub use engine::{invariance_residual, run, Engine, EmbeddingSample, KamConfig, KamProblem, Phase, ResidualReport, StepLog, TorusResult};
pub use homological::{homological_residual, solve_homological, HomologicalMode, HomologicalSolution};
pub use schedule::{make_schedule, ScheduleEcho, ScheduleParams};
pub use step::{invert_generating, symplectic_defect, Chain, SymplecticStep};
