//! Fixed-point solver: Picard iteration of the integral map on a window,
//! step-length selection from a sampled bound, and method-of-steps
//! extension by restarting the problem at the end of each window.
//!
//! The map being iterated sends a perturbation `η` (zero on the history)
//! to the cumulative integral of `s ↦ f(σ + s, x̃_{σ+s} + η_s)`, where `x̃`
//! is the initial history frozen at its final value. Its fixed points are
//! exactly the solutions through `(σ, φ)`, reconstructed as `x = x̃ + η`.

use crate::grid::{
    compose_state, frozen_extension, steps_of, sup_dist, EtaFn, GridError, HistorySegment,
    Trajectory,
};
use crate::rhs::{
    estimate_bound, EvalError, RhsError, RhsEval, SegmentView, Tube,
};
use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum SolverError {
    /// Even a single grid step violates the step rule; the grid is too
    /// coarse for the local bound.
    #[error("step underflow: bound {bound} forces a step below h = {h} (β̄ = {beta_bar})")]
    StepUnderflow { bound: f64, beta_bar: f64, h: f64 },
    #[error("no convergence after {iters} iterations (last residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },
    /// An iterate left the candidate set — the sampled bound was too small.
    /// Re-estimate with a larger radius or density.
    #[error("self-mapping violated: iterate sup-norm {sup} is not below β = {beta}")]
    SelfMapViolation { sup: f64, beta: f64 },
    #[error(transparent)]
    Rhs(#[from] RhsError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{0}")]
    Invalid(String),
}

impl From<EvalError> for SolverError {
    fn from(e: EvalError) -> Self {
        SolverError::Rhs(RhsError::Eval(e))
    }
}

/// An initial-value problem on a fixed grid: `x'(t) = f(t, x_t)` for
/// `t ∈ [σ, σ + horizon]` with `x_σ = φ`.
#[derive(Clone)]
pub struct ProblemSpec {
    sigma: f64,
    phi: HistorySegment,
    f: Arc<dyn RhsEval>,
    horizon: f64,
    h: f64,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("ProblemSpec")
            .field("sigma", &self.sigma)
            .field("r", &self.r())
            .field("dim", &self.dim())
            .field("horizon", &self.horizon)
            .field("h", &self.h)
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(
        sigma: f64,
        phi: HistorySegment,
        f: Arc<dyn RhsEval>,
        horizon: f64,
        h: f64,
    ) -> Result<Self, SolverError> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(SolverError::Invalid(format!("step must be positive, got {h}")));
        }
        if (phi.step() - h).abs() > 1e-12 * h {
            return Err(SolverError::Invalid(format!(
                "history grid step {} does not match h = {h}",
                phi.step()
            )));
        }
        if !(horizon > 0.0) {
            return Err(SolverError::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        let steps = steps_of(horizon, h);
        if steps == 0 || (horizon - steps as f64 * h).abs() > 1e-9 * horizon.max(1.0) {
            return Err(SolverError::Invalid(format!(
                "horizon {horizon} is not a whole number of steps of {h}"
            )));
        }
        if f.dim() != phi.dim() {
            return Err(SolverError::Invalid(format!(
                "rhs dimension {} vs history dimension {}",
                f.dim(),
                phi.dim()
            )));
        }
        let r = phi.r();
        if let Some(d) = f.delays().last() {
            if *d > r + 1e-9 * r.max(1.0) {
                return Err(SolverError::Invalid(format!(
                    "rhs delay {d} exceeds history span {r}"
                )));
            }
        }
        Ok(ProblemSpec { sigma, phi, f, horizon, h })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn r(&self) -> f64 {
        self.phi.r()
    }

    pub fn r_steps(&self) -> usize {
        self.phi.delay_steps()
    }

    pub fn phi(&self) -> &HistorySegment {
        &self.phi
    }

    pub fn f(&self) -> &Arc<dyn RhsEval> {
        &self.f
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn horizon_steps(&self) -> usize {
        steps_of(self.horizon, self.h)
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.phi.dim()
    }
}

/// Receives every `(t, state)` pair the right-hand side is evaluated at.
/// Observation forces materialisation of each state segment, so observed
/// runs are slower; `None` paths never build segments.
pub trait EvalObserver {
    fn observe(&mut self, t: f64, state: &HistorySegment);
}

/// Solver knobs beyond the problem itself. `beta_bar` defaults to half the
/// tube radius, leaving the other half as head-room for drift of the data.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub tube_radius: f64,
    pub tol: f64,
    pub beta_bar: Option<f64>,
    pub max_iter: usize,
    pub sample_density: usize,
}

impl SolverConfig {
    pub fn new(tube_radius: f64, tol: f64) -> Self {
        SolverConfig { tube_radius, tol, beta_bar: None, max_iter: 60, sample_density: 3 }
    }

    fn beta(&self) -> f64 {
        self.beta_bar.unwrap_or(0.5 * self.tube_radius)
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepInfo {
    /// Absolute time the step starts at.
    pub start: f64,
    /// Step length ā.
    pub len: f64,
    /// Sampled bound M used for the step rule.
    pub bound: f64,
    pub beta_bar: f64,
    pub picard_iters: usize,
    /// Final distance between successive iterates.
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "kind", content = "reason")]
pub enum SolveStatus {
    Completed,
    /// Terminal: the inner failure is recorded, partial results are kept.
    Stalled(String),
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Reconstructed trajectory `x = x̃ + η` on `[σ - r, σ + achieved]`.
    pub x: Trajectory,
    pub eta: EtaFn,
    pub steps: Vec<StepInfo>,
    /// Forward extent actually covered (= horizon when Completed).
    pub achieved: f64,
    /// Fixed-point residual of `eta` under the single global map.
    pub residual: f64,
    pub status: SolveStatus,
}

impl SolveResult {
    pub fn diagnostics(&self) -> serde_json::Value {
        serde_json::json!({
            "status": self.status,
            "achieved": self.achieved,
            "residual": self.residual,
            "steps": self.steps,
        })
    }
}

// --------------------------------------------------------- the Picard map --

fn state_err(e: GridError) -> EvalError {
    EvalError::State(e.to_string())
}

/// One application of the integral map: cumulative composite trapezoid of
/// `s ↦ f(σ + s, x̃_{σ+s} + η_s)` over `[0, a]`, zero on the history.
pub fn picard_map(p: &ProblemSpec, eta: &EtaFn, a: f64) -> Result<EtaFn, SolverError> {
    picard_map_inner(p, eta, a, &mut None)
}

pub fn picard_map_observed(
    p: &ProblemSpec,
    eta: &EtaFn,
    a: f64,
    obs: &mut dyn EvalObserver,
) -> Result<EtaFn, SolverError> {
    let mut slot: Option<&mut dyn EvalObserver> = Some(obs);
    picard_map_inner(p, eta, a, &mut slot)
}

fn picard_map_inner(
    p: &ProblemSpec,
    eta: &EtaFn,
    a: f64,
    obs: &mut Option<&mut dyn EvalObserver>,
) -> Result<EtaFn, SolverError> {
    let h = p.h;
    let n = steps_of(a, h);
    if (a - n as f64 * h).abs() > 1e-9 * a.abs().max(1.0) {
        return Err(SolverError::Invalid(format!("window {a} is not a whole number of steps")));
    }
    if eta.a_steps() != n || eta.delay_steps() != p.r_steps() {
        return Err(SolverError::Invalid(format!(
            "eta domain [-{}, {}] does not match window [-{}, {a}]",
            eta.r(),
            eta.a(),
            p.r()
        )));
    }
    let dim = p.dim();
    let xref = frozen_extension(&p.phi, p.sigma, n)?;

    // Integrand at every node, then one cumulative trapezoid sweep.
    let mut g = vec![0.0; (n + 1) * dim];
    for j in 0..=n {
        let s = j as f64 * h;
        let out = &mut g[j * dim..(j + 1) * dim];
        if let Some(ob) = obs.as_deref_mut() {
            let seg = compose_state(&xref, eta, s)?;
            ob.observe(p.sigma + s, &seg);
            p.f.eval_into(p.sigma + s, &SegmentView(&seg), out)?;
        } else {
            let view = |comp: usize, d: f64| -> Result<f64, EvalError> {
                let xv = xref.eval_comp(p.sigma + s - d, comp).map_err(state_err)?;
                let ev = eta.eval_comp(s - d, comp).map_err(state_err)?;
                Ok(xv + ev)
            };
            p.f.eval_into(p.sigma + s, &view, out)?;
        }
    }

    let mut forward = vec![0.0; (n + 1) * dim];
    for j in 0..n {
        for i in 0..dim {
            forward[(j + 1) * dim + i] =
                forward[j * dim + i] + 0.5 * h * (g[j * dim + i] + g[(j + 1) * dim + i]);
        }
    }
    Ok(EtaFn::from_forward(p.r_steps(), h, dim, &forward)?)
}

/// Sup-norm defect of `eta` as a fixed point of the integral map on its
/// own window.
pub fn fixed_point_residual(p: &ProblemSpec, eta: &EtaFn) -> Result<f64, SolverError> {
    let mapped = picard_map(p, eta, eta.a())?;
    Ok(sup_dist(mapped.as_fn(), eta.as_fn())?)
}

// ---------------------------------------------------------- step selection --

/// Largest whole-step window `ā ≤ a_max` with `M·ā ≤ 0.5·β̄`. The factor
/// 0.5 keeps strict inequality with head-room against an under-estimated M.
pub fn choose_step(m: f64, beta_bar: f64, h: f64, a_max: f64) -> Result<f64, SolverError> {
    debug_assert!(m >= 0.0 && beta_bar > 0.0 && a_max >= h);
    let max_steps = steps_of(a_max, h).max(1);
    if m == 0.0 {
        return Ok(max_steps as f64 * h);
    }
    let ideal = 0.5 * beta_bar / (m * h);
    // Tolerate float hair just below a whole step count before flooring.
    let steps = (ideal * (1.0 + 1e-12) + 1e-9).floor() as usize;
    if steps == 0 {
        return Err(SolverError::StepUnderflow { bound: m, beta_bar, h });
    }
    Ok(steps.min(max_steps) as f64 * h)
}

// --------------------------------------------------------- Picard iteration --

/// Iterate the map from `η ≡ 0` until successive iterates are `tol`-close
/// in sup norm. Returns the last iterate and the full residual history.
/// Every iterate must stay in the candidate set (zero history, sup norm
/// strictly below `beta`); leaving it means the caller's bound was wrong.
pub fn picard_solve(
    p: &ProblemSpec,
    a: f64,
    beta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(EtaFn, Vec<f64>), SolverError> {
    let start = EtaFn::zero(p.r_steps(), p.h, p.dim(), steps_of(a, p.h));
    picard_solve_from(p, a, beta, tol, max_iter, start)
}

/// Same iteration from an arbitrary admissible starting point, used by
/// uniqueness spot-checks.
pub fn picard_solve_from(
    p: &ProblemSpec,
    a: f64,
    beta: f64,
    tol: f64,
    max_iter: usize,
    start: EtaFn,
) -> Result<(EtaFn, Vec<f64>), SolverError> {
    picard_solve_inner(p, a, beta, tol, max_iter, start, &mut None)
}

fn picard_solve_inner(
    p: &ProblemSpec,
    a: f64,
    beta: f64,
    tol: f64,
    max_iter: usize,
    start: EtaFn,
    obs: &mut Option<&mut dyn EvalObserver>,
) -> Result<(EtaFn, Vec<f64>), SolverError> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(SolverError::Invalid("tol must be positive and max_iter nonzero".into()));
    }
    if !start.is_admissible(beta) {
        return Err(SolverError::SelfMapViolation { sup: start.sup_norm(), beta });
    }
    let mut eta = start;
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let next = picard_map_inner(p, &eta, a, obs)?;
        if !next.is_admissible(beta) {
            return Err(SolverError::SelfMapViolation { sup: next.sup_norm(), beta });
        }
        let res = next.sup_dist_to(&eta)?;
        history.push(res);
        eta = next;
        if res <= tol {
            return Ok((eta, history));
        }
    }
    Err(SolverError::NoConvergence {
        iters: max_iter,
        residual: history.last().copied().unwrap_or(f64::INFINITY),
    })
}

// -------------------------------------------------------- extension / splice --

/// The restart of `p` at forward offset `a1`: starting point `σ + a1`,
/// initial value the solution segment there.
fn restart_spec(p: &ProblemSpec, eta: &EtaFn, horizon: f64) -> Result<ProblemSpec, SolverError> {
    let a1 = eta.a();
    let xref = frozen_extension(&p.phi, p.sigma, eta.a_steps())?;
    let psi = compose_state(&xref, eta, a1)?;
    ProblemSpec::new(p.sigma + a1, psi, p.f.clone(), horizon, p.h)
}

/// Concatenate a continuation onto `eta`: the result follows `eta` on its
/// window and continues with `eta(a1) + eta0(t - a1)` after it. Continuity
/// at the joint is exact because `eta0` starts at zero.
fn splice(eta: &EtaFn, eta0: &EtaFn) -> Result<EtaFn, SolverError> {
    let dim = eta.dim();
    if eta0.dim() != dim || (eta0.step() - eta.step()).abs() > 1e-12 * eta.step() {
        return Err(SolverError::Invalid("continuation grid mismatch".into()));
    }
    let mut forward = eta.forward().to_vec();
    let base: Vec<f64> = forward[forward.len() - dim..].to_vec();
    let cont = eta0.forward();
    for j in 1..=eta0.a_steps() {
        for i in 0..dim {
            forward.push(base[i] + cont[j * dim + i]);
        }
    }
    Ok(EtaFn::from_forward(eta.delay_steps(), eta.step(), dim, &forward)?)
}

/// Extend a fixed point `eta1` on `[-r, a1]` to `[-r, target]` by solving
/// the restarted problem on `[0, target - a1]` and splicing. The caller is
/// responsible for `target - a1` being an admissible window (via
/// [`choose_step`]); errors from the restarted iteration propagate.
pub fn extend_solution(
    p: &ProblemSpec,
    eta1: &EtaFn,
    target: f64,
    cfg: &SolverConfig,
) -> Result<EtaFn, SolverError> {
    let a1 = eta1.a();
    let rest = target - a1;
    if rest <= 0.0 {
        return Err(SolverError::Invalid(format!(
            "target {target} does not extend the window [0, {a1}]"
        )));
    }
    let p0 = restart_spec(p, eta1, rest)?;
    let (eta0, _) = picard_solve(&p0, rest, cfg.beta(), cfg.tol, cfg.max_iter)?;
    splice(eta1, &eta0)
}

// ------------------------------------------------------------------- solve --

/// Node-pair increment check: solver-produced windows must satisfy
/// `|η(t) - η(t')| ≤ M (t - t') + slack` on all node pairs.
fn equicontinuity_defect(eta0: &EtaFn, m: f64) -> f64 {
    let dim = eta0.dim();
    let h = eta0.step();
    let fwd = eta0.forward();
    let n = eta0.a_steps();
    let mut worst: f64 = 0.0;
    for j in 0..=n {
        for j2 in j + 1..=n {
            let dt = (j2 - j) as f64 * h;
            for i in 0..dim {
                let diff = (fwd[j2 * dim + i] - fwd[j * dim + i]).abs();
                worst = worst.max(diff - m * dt);
            }
        }
    }
    worst
}

/// Drive the problem to its horizon: sample a bound on the current tube,
/// pick a step, run the Picard iteration on the restarted window, splice,
/// repeat. Inner failures never propagate — they end the run with a
/// `Stalled` status and whatever extent was achieved.
pub fn solve(p: &ProblemSpec, tube_radius: f64, tol: f64) -> SolveResult {
    solve_with(p, &SolverConfig::new(tube_radius, tol), None)
}

pub fn solve_with(
    p: &ProblemSpec,
    cfg: &SolverConfig,
    mut observer: Option<&mut dyn EvalObserver>,
) -> SolveResult {
    let h = p.h;
    let dim = p.dim();
    let k = p.r_steps();
    let horizon_steps = p.horizon_steps();
    let beta = cfg.beta();

    let mut eta = EtaFn::zero(k, h, dim, 0);
    let mut steps: Vec<StepInfo> = Vec::new();
    let mut status = SolveStatus::Completed;

    loop {
        let done = eta.a_steps();
        if done >= horizon_steps {
            break;
        }
        let remaining = (horizon_steps - done) as f64 * h;
        let start_t = p.sigma + done as f64 * h;

        let step = (|| -> Result<(EtaFn, StepInfo), SolverError> {
            // Tube around the frozen extension of the current end state.
            let p_rest = restart_spec(p, &eta, remaining)?;
            let xref0 = frozen_extension(&p_rest.phi, p_rest.sigma, horizon_steps - done)?;
            let tube = Tube::new(xref0, cfg.tube_radius, start_t, start_t + remaining)?;
            let m = estimate_bound(p.f.as_ref(), &tube, cfg.sample_density)?;
            let a_bar = choose_step(m, beta, h, remaining)?;
            // Per-step tolerance scaled so the stacked windows keep the
            // global residual within the advertised 10·tol.
            let tol_step = (cfg.tol * a_bar / (2.0 * p.horizon)).max(1e-15);
            let (eta0, hist) = picard_solve_inner(
                &p_rest,
                a_bar,
                beta,
                tol_step,
                cfg.max_iter,
                EtaFn::zero(k, h, dim, steps_of(a_bar, h)),
                &mut observer,
            )?;
            // Self-mapping: the window's fixed point obeys the bound that
            // justified the step. Failing this means M was wrong.
            let cap = m * a_bar;
            if eta0.sup_norm() > cap * (1.0 + 1e-9) + 1e-12 {
                return Err(SolverError::SelfMapViolation { sup: eta0.sup_norm(), beta: cap });
            }
            let defect = equicontinuity_defect(&eta0, m);
            if defect > 2.0 * cfg.tol {
                return Err(SolverError::Invalid(format!(
                    "equicontinuity defect {defect:e} exceeds 2·tol on step at {start_t}"
                )));
            }
            let info = StepInfo {
                start: start_t,
                len: a_bar,
                bound: m,
                beta_bar: beta,
                picard_iters: hist.len(),
                residual: hist.last().copied().unwrap_or(0.0),
            };
            Ok((splice(&eta, &eta0)?, info))
        })();

        match step {
            Ok((next, info)) => {
                steps.push(info);
                eta = next;
            }
            Err(e) => {
                status = SolveStatus::Stalled(e.to_string());
                break;
            }
        }
    }

    let achieved_steps = eta.a_steps();
    let achieved = achieved_steps as f64 * h;

    // Global residual under the single un-restarted map; a few polishing
    // sweeps if the stacked windows left more defect than expected.
    let mut residual = f64::INFINITY;
    if achieved_steps > 0 {
        let whole = ProblemSpec {
            sigma: p.sigma,
            phi: p.phi.clone(),
            f: p.f.clone(),
            horizon: achieved,
            h,
        };
        for _ in 0..4 {
            match fixed_point_residual(&whole, &eta) {
                Ok(rr) => {
                    residual = rr;
                    if rr <= 0.5 * cfg.tol {
                        break;
                    }
                    match picard_map(&whole, &eta, achieved) {
                        Ok(polished) => eta = polished,
                        Err(_) => break,
                    }
                }
                Err(_) => break,
            }
        }
        if residual > 10.0 * cfg.tol && status == SolveStatus::Completed {
            status = SolveStatus::Stalled(format!(
                "global residual {residual:e} exceeds 10·tol after polishing"
            ));
        }
    } else {
        residual = 0.0;
    }

    // Reconstruct x = x̃ + η on the achieved window.
    let xref = frozen_extension(&p.phi, p.sigma, achieved_steps)
        .expect("achieved window extends the validated history grid");
    let mut values = xref.as_fn().values().to_vec();
    for (v, e) in values.iter_mut().zip(eta.as_fn().values()) {
        *v += e;
    }
    let x = crate::grid::SampledFn::new(xref.as_fn().start(), h, dim, values)
        .and_then(|f| Trajectory::new(f, p.sigma, k))
        .expect("reconstruction reuses a validated grid");

    SolveResult { x, eta, steps, achieved, residual, status }
}
