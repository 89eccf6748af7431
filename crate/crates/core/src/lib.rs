//! Inverse iteration for ground states of the discrete p-Laplacian.

pub mod calculus;
pub mod error;
pub mod geometry;
pub mod infinity;
pub mod iteration;
pub mod linalg;
pub mod oracles;
pub mod solver;

pub use calculus::{EnergyReport, GridFunction};
pub use error::{Error, Result};
pub use geometry::{build_grid, Domain, DomainSpec, Grid, Mask, NodeKind};
pub use solver::{signed_power, solve_step, solve_step_from, DescentMethod, SolverConfig, SolveOutcome};
pub use iteration::{
    check_monotonicity, consistency_estimators, inverse_iterate, InitPolicy, IterationParams, IterationRun,
    IterationTrace, StepRecord,
};
pub use oracles::{lambda2_reference, lambda_p_shooting_1d, rayleigh_bruteforce};
pub use infinity::{monotone_supnorm_check, sweep, SweepEntry, SweepResult};
