//! Distributed computation of distribution locational marginal prices.

pub mod bench;
pub mod diagnostics;
pub mod exec;
pub mod grid;
pub mod opf;
pub mod pd;
pub mod problem;
pub mod projections;
pub mod sim;
pub mod sparse;

pub use exec::Execution;
pub use grid::{InstanceError, NetworkInstance};
pub use pd::{BlockProblem, SamplingKind, SamplingScheme};
pub use problem::OpfProblem;
