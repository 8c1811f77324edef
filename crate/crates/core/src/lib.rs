//! Constructive KAM normal forms for time-periodic, nearly integrable Hamiltonians,
//! with Diophantine measure estimates and Duffing network diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diophantine;
pub mod duffing;
pub mod error;
pub mod grid;
pub mod kam;
pub mod series;
pub mod smoothing;
pub mod taylor;

pub use error::{KamError, Result};
pub use series::{Average, Domain, FourierTaylorSeries, ModeIndex, Var};
pub use taylor::Taylor;
