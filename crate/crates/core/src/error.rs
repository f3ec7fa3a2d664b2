//! Error types for each subsystem.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected (n_x, n_u, n_d) = {expected:?}, got {got:?}")]
    Dimension { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("integration of model `{model}` produced a non-finite state")]
    IntegrationFailure { model: String },
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("robust horizon N_R = {n_r} must satisfy 1 <= N_R <= N = {n}")]
    RobustHorizon { n: usize, n_r: usize },
    #[error("scenario count {count} exceeds the cap {cap}")]
    TooManyScenarios { count: u128, cap: usize },
    #[error("invalid tree: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerminalError {
    #[error("steady-state problem for realization {realization} has no feasible solution: {reason}")]
    InfeasibleEquilibrium { realization: usize, reason: String },
    #[error("Riccati iteration did not converge for realization {realization} (residual {residual:e})")]
    RiccatiNonConvergence { realization: usize, residual: f64 },
    #[error("closed-loop matrix is not Schur stable (spectral radius {spectral_radius})")]
    Unstable { spectral_radius: f64 },
    #[error("terminal radius undefined: {0}")]
    RadiusUndefined(String),
    #[error("error-bound fit failed: {0}")]
    Fit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("horizon N_k = {n_k} must be at least the robust horizon N_R = {n_r} >= 1")]
    Horizon { n_k: usize, n_r: usize },
    #[error("no terminal ingredients for realization {0}")]
    MissingIngredient(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("maximum number of iterations ({iterations}) reached; primal infeasibility {inf_pr:e}, dual infeasibility {inf_du:e}")]
    MaxIterations { iterations: usize, inf_pr: f64, inf_du: f64 },
    #[error("line search failed to make progress at iteration {iteration}")]
    RestorationFailure { iteration: usize },
    #[error("objective unbounded below (value {value:e})")]
    Unbounded { value: f64 },
    #[error("problem appears infeasible; most violated constraint is {kind} row {index} (violation {violation:e})")]
    Infeasible { kind: String, index: usize, violation: f64 },
    #[error("KKT matrix singular ({0}); LICQ or second-order sufficiency violated")]
    SingularKkt(String),
    #[error("non-finite value encountered in problem evaluation")]
    NonFinite,
    #[error("invalid problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("solver failed at iteration k = {k} after cold-start retry: {source}")]
    Solver { k: usize, source: SolverError },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("logs are not comparable: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
