//! Adaptive-horizon multi-stage nonlinear model predictive control.
//!
//! The crate covers the offline synthesis of terminal ingredients for every
//! parameter realization, the assembly of the scenario-tree optimal control
//! problem as a parametric NLP, an interior-point solver with parametric
//! sensitivity, the horizon-update algorithm, and a closed-loop simulator.

// Index loops mirror the matrix notation; negated float comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ocp;
pub mod scenario;
pub mod solver;
pub mod terminal;

pub use error::{ModelError, OcpError, ScenarioError, SimError, SolverError, TerminalError};
