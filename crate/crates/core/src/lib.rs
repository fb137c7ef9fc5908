//! Numerical study of retarded functional differential equations
//! `x'(t) = f(t, x_t)` with bounded delay, built around a fixed-point
//! integral formulation: a solution on `[σ, σ + a]` is recovered as the
//! fixed point of the map
//!
//! ```text
//! (T η)(t) = ∫₀ᵗ f(σ + s, x̃_{σ+s} + η_s) ds
//! ```
//!
//! where `x̃` freezes the initial history at its final value. The crate
//! provides the grid-based function spaces this runs on, an expression
//! parser for right-hand sides, the Picard/step-extension solver, a set of
//! convergence-mode checkers for function sequences, a harness that probes
//! how solutions respond to perturbed problem data, and a Fourier partial-sum
//! application.
//!
//! Everything is finite and sampled, so no check here ever *proves* a
//! property: checkers either refute one with a reproducible witness or
//! report consistency up to the resolution they were run at.

pub mod dependence;
pub mod fourier;
pub mod grid;
pub mod lab;
pub mod rhs;
pub mod solver;

pub use grid::{
    compose_state, frozen_extension, sup_dist, EtaFn, GridError, HistorySegment, SampledFn,
    Trajectory,
};
pub use rhs::{
    estimate_bound, eval_rhs, parse_rhs, EvalError, ParseError, Rhs, RhsError, RhsEval,
    ScalarExpr, StateView, Tube,
};
pub use lab::{
    check_continuous_convergence, check_exhaustive, check_generalized_cont_convergence,
    check_pointwise, check_uniform_on_compacta, check_weak_exhaustive, cross_check,
    random_tube_max, replay_gap, uniform_bound_on_tube, BoxSpace, CheckerRegistry,
    ConsistencyMatrix, ConvergenceCheck, ExprFamily, Family, FnSeq, GapKind, Hit, LabConfig,
    LabError, Resolution, RhsFamily, SampleSpace, ScalarFamily, TubeBoundReport, TubePoint,
    TubeSpace, Verdict, VerdictTag, Witness,
};
pub use solver::{
    choose_step, extend_solution, fixed_point_residual, picard_map, picard_solve, solve,
    solve_with, EvalObserver, ProblemSpec, SolveResult, SolveStatus, SolverConfig, SolverError,
    StepInfo,
};
pub use dependence::{
    build_family, estimate_rate, eta_gap, run_dependence, trajectory_gap, uniqueness_spot_check,
    BoundAudit, CoeffRule, DependenceConfig, DependenceError, DependenceReport, FamilySpec,
    MemberRun, RateFit, RungVerdict, UniquenessAudit,
};
pub use fourier::{
    fourier_coeffs, partial_sum, run_fourier_application, FourierCoeffs, FourierConfig,
    FourierError, FourierReport, OrderRow, PartialSum, DEFAULT_QUAD,
};
