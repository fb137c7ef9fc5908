//! Right-hand sides `f(t, x_t)` as parsed expression vectors, plus the
//! sampled bound estimator used for step-size selection.
//!
//! A right-hand side is one expression per state component. Expressions may
//! reference the running time `t` and delayed state values `x[i](t - d)`
//! where the delay `d` is a literal constant in `[0, r]`. Evaluation against
//! a history segment resolves `x[i](t - d)` to segment component `i` at
//! offset `-d`.

mod expr;

pub use expr::{
    parse, BinOp, EvalError, Expr, ExprDisplay, Func, NoState, ParseCtx, ParseError, StateView,
};

use crate::grid::{GridError, HistorySegment, Trajectory};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RhsError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{0}")]
    Invalid(String),
}

/// Anything the solver can integrate: an evaluator for `f(t, ψ)` together
/// with the set of delayed references it reads.
pub trait RhsEval: Send + Sync {
    fn dim(&self) -> usize;
    /// All distinct delays read by any component, sorted ascending.
    fn delays(&self) -> &[f64];
    /// All distinct (component, delay) reads, for perturbation design.
    fn refs(&self) -> &[(usize, f64)];
    fn eval_into(&self, t: f64, state: &dyn StateView, out: &mut [f64]) -> Result<(), EvalError>;
}

/// A parsed vector right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct Rhs {
    components: Vec<Expr>,
    dim: usize,
    max_delay: f64,
    delays: Vec<f64>,
    refs: Vec<(usize, f64)>,
}

const RHS_VARS: &[&str] = &["t"];

impl Rhs {
    /// Parse one expression per component. Delays must be literals in
    /// `[0, max_delay]`; `params` are substituted as constants.
    pub fn parse(
        sources: &[impl AsRef<str>],
        max_delay: f64,
        params: &BTreeMap<String, f64>,
    ) -> Result<Self, RhsError> {
        if sources.is_empty() {
            return Err(RhsError::Invalid("right-hand side needs at least one component".into()));
        }
        let dim = sources.len();
        let ctx = ParseCtx { vars: RHS_VARS, params, state: Some((dim, max_delay)) };
        let mut components = Vec::with_capacity(dim);
        for s in sources {
            components.push(parse(s.as_ref(), &ctx)?);
        }
        Ok(Self::from_components(components, dim, max_delay))
    }

    fn from_components(components: Vec<Expr>, dim: usize, max_delay: f64) -> Self {
        let mut refs = Vec::new();
        for c in &components {
            c.collect_refs(&mut refs);
        }
        refs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        refs.dedup();
        let mut delays: Vec<f64> = refs.iter().map(|r| r.1).collect();
        delays.sort_by(|a, b| a.total_cmp(b));
        delays.dedup();
        Rhs { components, dim, max_delay, delays, refs }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_delay(&self) -> f64 {
        self.max_delay
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    /// Canonical printed form, one string per component. Parsing these back
    /// reproduces the same trees.
    pub fn sources(&self) -> Vec<String> {
        self.components
            .iter()
            .map(|e| format!("{}", ExprDisplay { expr: e, vars: RHS_VARS }))
            .collect()
    }

    /// `self + c * g`, componentwise; used to build perturbed families.
    pub fn add_scaled(&self, g: &Rhs, c: f64) -> Result<Rhs, RhsError> {
        if g.dim != self.dim {
            return Err(RhsError::Invalid(format!(
                "dimension mismatch: {} vs {}",
                self.dim, g.dim
            )));
        }
        let components = self
            .components
            .iter()
            .zip(&g.components)
            .map(|(a, b)| {
                Expr::Bin(
                    BinOp::Add,
                    Box::new(a.clone()),
                    Box::new(Expr::Bin(
                        BinOp::Mul,
                        Box::new(Expr::Const(c)),
                        Box::new(b.clone()),
                    )),
                )
            })
            .collect();
        Ok(Self::from_components(
            components,
            self.dim,
            self.max_delay.max(g.max_delay),
        ))
    }
}

impl RhsEval for Rhs {
    fn dim(&self) -> usize {
        self.dim
    }

    fn delays(&self) -> &[f64] {
        &self.delays
    }

    fn refs(&self) -> &[(usize, f64)] {
        &self.refs
    }

    fn eval_into(&self, t: f64, state: &dyn StateView, out: &mut [f64]) -> Result<(), EvalError> {
        let vars = [t];
        for (i, c) in self.components.iter().enumerate() {
            out[i] = c.eval(&vars, state)?;
        }
        Ok(())
    }
}

/// Convenience entry point mirroring [`Rhs::parse`] for a scalar equation.
pub fn parse_rhs(source: &str, max_delay: f64) -> Result<Rhs, RhsError> {
    Rhs::parse(&[source], max_delay, &BTreeMap::new())
}

/// A scalar expression over named variables: sequence families `f(x, k)`,
/// history expressions `φ(theta)`, coefficient rules `c(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarExpr {
    expr: Expr,
    vars: Vec<String>,
}

impl ScalarExpr {
    pub fn parse(
        src: &str,
        vars: &[&str],
        params: &BTreeMap<String, f64>,
    ) -> Result<Self, ParseError> {
        let expr = parse(src, &ParseCtx::scalar(vars, params))?;
        Ok(ScalarExpr { expr, vars: vars.iter().map(|s| s.to_string()).collect() })
    }

    /// `vals` pairs positionally with the variable list given at parse time.
    pub fn eval(&self, vals: &[f64]) -> Result<f64, EvalError> {
        debug_assert_eq!(vals.len(), self.vars.len());
        self.expr.eval(vals, &NoState)
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn source(&self) -> String {
        let vars: Vec<&str> = self.vars.iter().map(String::as_str).collect();
        format!("{}", ExprDisplay { expr: &self.expr, vars: &vars })
    }
}

/// View of a history segment as the state behind delayed references.
pub struct SegmentView<'a>(pub &'a HistorySegment);

impl StateView for SegmentView<'_> {
    fn delayed(&self, comp: usize, delay: f64) -> Result<f64, EvalError> {
        self.0
            .eval_comp(-delay, comp)
            .map_err(|e| EvalError::State(e.to_string()))
    }
}

/// Evaluate `f(t, seg)` for all components.
pub fn eval_rhs(f: &Rhs, t: f64, seg: &HistorySegment) -> Result<Vec<f64>, RhsError> {
    let mut out = vec![0.0; f.dim()];
    f.eval_into(t, &SegmentView(seg), &mut out)?;
    Ok(out)
}

/// A sup-norm neighbourhood of a reference trajectory over a time window:
/// all states within `radius` of the reference's segments for times in
/// `[t_start, t_end]`.
#[derive(Debug, Clone)]
pub struct Tube {
    x0: Trajectory,
    radius: f64,
    t_start: f64,
    t_end: f64,
}

impl Tube {
    pub fn new(x0: Trajectory, radius: f64, t_start: f64, t_end: f64) -> Result<Self, RhsError> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(RhsError::Invalid(format!("tube radius must be positive, got {radius}")));
        }
        let tol = 1e-9 * t_end.abs().max(1.0);
        if t_start < x0.sigma() - tol || t_end > x0.as_fn().end() + tol || t_start > t_end + tol {
            return Err(RhsError::Invalid(format!(
                "tube window [{t_start}, {t_end}] not contained in trajectory range [{}, {}]",
                x0.sigma(),
                x0.as_fn().end()
            )));
        }
        Ok(Tube { x0, radius, t_start, t_end })
    }

    pub fn x0(&self) -> &Trajectory {
        &self.x0
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// Grid times of the reference inside the window.
    pub fn time_nodes(&self) -> Vec<f64> {
        let f = self.x0.as_fn();
        let tol = 1e-9 * self.t_end.abs().max(1.0);
        (0..f.nodes())
            .map(|j| f.node_time(j))
            .filter(|t| *t >= self.t_start - tol && *t <= self.t_end + tol)
            .collect()
    }

    /// Distance from a (time, state) pair to the reference graph, measured
    /// with `max(|Δt|, sup-norm)` against the nearest few grid segments.
    /// This over-estimates the true distance, so "inside" answers are sound.
    pub fn graph_dist(&self, t: f64, state: &HistorySegment) -> Result<f64, RhsError> {
        let f = self.x0.as_fn();
        let h = f.step();
        let lo = ((self.t_start - f.start()) / h).round() as i64;
        let hi = ((self.t_end - f.start()) / h).round() as i64;
        let j = ((t - f.start()) / h).round() as i64;
        let mut best = f64::INFINITY;
        for cand in [j - 1, j, j + 1] {
            let cand = cand.clamp(lo, hi);
            let node_t = f.node_time(cand as usize);
            let seg = self.x0.segment_at(node_t)?;
            let d = (t - node_t).abs().max(seg.sup_dist_to(state)?);
            best = best.min(d);
        }
        Ok(best)
    }
}

// ------------------------------------------------------- bound estimation --

/// Deterministic perturbations of the reference state, all scaled to the
/// tube radius.
enum Perturb {
    Zero,
    /// One component shifted by a constant.
    Constant { comp: usize, amp: f64 },
    /// One component bumped by a width-`h` hat at a single grid node.
    Hat { comp: usize, node: usize, amp: f64 },
    /// Every delayed reference pushed to `±radius` simultaneously: node
    /// values take the sign of the nearest referenced delay within their
    /// component. Affine right-hand sides attain their tube extremes here.
    Pattern { per_comp: Vec<Vec<(f64, f64)>> },
}

impl Perturb {
    /// Value of the perturbation for `comp` at offset `theta ∈ [-r, 0]`,
    /// matching what linear interpolation of its node values would give.
    fn value(&self, comp: usize, theta: f64, k: usize, h: f64) -> f64 {
        match self {
            Perturb::Zero => 0.0,
            Perturb::Constant { comp: c, amp } => {
                if *c == comp {
                    *amp
                } else {
                    0.0
                }
            }
            Perturb::Hat { comp: c, node, amp } => {
                if *c != comp {
                    return 0.0;
                }
                let center = (*node as f64 - k as f64) * h;
                let w = 1.0 - (theta - center).abs() / h;
                if w > 0.0 {
                    amp * w
                } else {
                    0.0
                }
            }
            Perturb::Pattern { per_comp } => {
                let refs = &per_comp[comp];
                if refs.is_empty() {
                    return 0.0;
                }
                if k == 0 {
                    return pattern_node_value(refs, 0.0);
                }
                // Interpolate between the bracketing node values.
                let u = (theta + k as f64 * h) / h;
                let j = (u.floor().max(0.0) as usize).min(k - 1);
                let w = (u - j as f64).clamp(0.0, 1.0);
                let t_j = (j as f64 - k as f64) * h;
                let a = pattern_node_value(refs, t_j);
                let b = pattern_node_value(refs, t_j + h);
                a + w * (b - a)
            }
        }
    }
}

fn pattern_node_value(refs: &[(f64, f64)], theta: f64) -> f64 {
    let mut best = refs[0];
    let mut best_d = (theta - refs[0].0).abs();
    for r in &refs[1..] {
        let d = (theta - r.0).abs();
        if d < best_d {
            best_d = d;
            best = *r;
        }
    }
    best.1
}

struct TubeView<'a> {
    x0: &'a Trajectory,
    tau: f64,
    perturb: &'a Perturb,
    k: usize,
    h: f64,
}

impl StateView for TubeView<'_> {
    fn delayed(&self, comp: usize, delay: f64) -> Result<f64, EvalError> {
        let base = self
            .x0
            .eval_comp(self.tau - delay, comp)
            .map_err(|e| EvalError::State(e.to_string()))?;
        Ok(base + self.perturb.value(comp, -delay, self.k, self.h))
    }
}

/// Largest pattern set: 2^n sign choices stay tractable up to this many
/// distinct delayed references.
const MAX_PATTERN_REFS: usize = 6;

/// Default multiplicative head-room on the sampled maximum.
pub const BOUND_SAFETY: f64 = 1.25;

/// Estimate `sup |f|` (max-abs over components) over a tube by sampling a
/// deterministic perturbation basis at every grid time in the window, then
/// inflating by [`BOUND_SAFETY`]. `sample_density` sets how many hat
/// positions are tried per component.
pub fn estimate_bound(f: &dyn RhsEval, tube: &Tube, sample_density: usize) -> Result<f64, RhsError> {
    estimate_bound_with_safety(f, tube, sample_density, BOUND_SAFETY)
}

pub fn estimate_bound_with_safety(
    f: &dyn RhsEval,
    tube: &Tube,
    sample_density: usize,
    safety: f64,
) -> Result<f64, RhsError> {
    if sample_density == 0 {
        return Err(RhsError::Invalid("sample_density must be at least 1".into()));
    }
    if f.dim() != tube.x0.dim() {
        return Err(RhsError::Invalid(format!(
            "rhs dimension {} vs trajectory dimension {}",
            f.dim(),
            tube.x0.dim()
        )));
    }
    let dim = f.dim();
    let k = tube.x0.delay_steps();
    let h = tube.x0.step();
    let rho = tube.radius;

    let mut basis = vec![Perturb::Zero];
    for comp in 0..dim {
        for amp in [rho, -rho] {
            basis.push(Perturb::Constant { comp, amp });
        }
    }
    if k > 0 {
        let positions: Vec<usize> = if sample_density == 1 {
            vec![k]
        } else {
            let mut p: Vec<usize> = (0..sample_density)
                .map(|j| ((j * k) as f64 / (sample_density - 1) as f64).round() as usize)
                .collect();
            p.dedup();
            p
        };
        for comp in 0..dim {
            for &node in &positions {
                for amp in [rho, -rho] {
                    basis.push(Perturb::Hat { comp, node, amp });
                }
            }
        }
    }
    let refs = f.refs();
    if refs.len() >= 2 && refs.len() <= MAX_PATTERN_REFS {
        for mask in 0u32..(1 << refs.len()) {
            let mut per_comp = vec![Vec::new(); dim];
            for (bit, (comp, delay)) in refs.iter().enumerate() {
                let amp = if mask & (1 << bit) != 0 { rho } else { -rho };
                per_comp[*comp].push((-delay, amp));
            }
            basis.push(Perturb::Pattern { per_comp });
        }
    }

    let mut out = vec![0.0; dim];
    let mut m: f64 = 0.0;
    for tau in tube.time_nodes() {
        for p in &basis {
            let view = TubeView { x0: &tube.x0, tau, perturb: p, k, h };
            f.eval_into(tau, &view, &mut out)?;
            for v in &out {
                m = m.max(v.abs());
            }
        }
    }
    Ok(m * safety)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{frozen_extension, HistorySegment, SampledFn, Trajectory};
    use proptest::prelude::*;

    fn const_traj(value: f64, sigma: f64, r_steps: usize, h: f64, a_steps: usize) -> Trajectory {
        let phi = HistorySegment::constant(r_steps, h, &[value]).unwrap();
        frozen_extension(&phi, sigma, a_steps).unwrap()
    }

    #[test]
    fn parse_print_is_a_fixed_point_for_rhs_dialect() {
        for src in ["-x[1](t-1)", "x[1](t) * t - x[2](t-0.25) / 2", "sin(x[1](t-1)) + t ^ 2"] {
            let f = Rhs::parse(&[src, "0"], 1.0, &BTreeMap::new()).unwrap();
            let printed = f.sources();
            let g = Rhs::parse(&printed, 1.0, &BTreeMap::new()).unwrap();
            assert_eq!(f.components(), g.components(), "{src}");
            assert_eq!(g.sources(), printed);
        }
    }

    #[test]
    fn eval_rhs_reads_delayed_state() {
        let f = Rhs::parse(&["-x[1](t-1) + t"], 1.0, &BTreeMap::new()).unwrap();
        let seg =
            HistorySegment::from_fn(10, 0.1, 1, |th, out| out[0] = 2.0 + th).unwrap();
        // x(t-1) is the segment at θ = -1, i.e. 2 - 1 = 1.
        let v = eval_rhs(&f, 3.0, &seg).unwrap();
        assert!((v[0] - (-1.0 + 3.0)).abs() < 1e-12);
        assert_eq!(f.delays(), &[1.0]);
    }

    #[test]
    fn delay_must_not_exceed_history() {
        let err = Rhs::parse(&["x[1](t-2)"], 1.0, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, RhsError::Parse(_)));
        assert!(err.to_string().contains("exceeds history length"));
    }

    #[test]
    fn bound_for_delayed_negation_on_constant_tube() {
        // f = -x(t-1) around x ≡ 1 with radius 1/2: worst sample is 1.5,
        // reported with 1.25 head-room.
        let x0 = const_traj(1.0, 0.0, 10, 0.1, 20);
        let tube = Tube::new(x0, 0.5, 0.0, 2.0).unwrap();
        let f = parse_rhs("-x[1](t-1)", 1.0).unwrap();
        let m = estimate_bound(&f, &tube, 3).unwrap();
        assert!(m >= 1.5, "m = {m}");
        assert!(m <= 1.875 + 1e-12, "m = {m}");
    }

    #[test]
    fn bound_for_pure_time_rhs() {
        let x0 = const_traj(0.0, 0.0, 5, 0.1, 20);
        let tube = Tube::new(x0, 0.5, 0.0, 2.0).unwrap();
        let f = parse_rhs("t", 0.5).unwrap();
        let m = estimate_bound(&f, &tube, 3).unwrap();
        assert!((2.0..=2.5 + 1e-12).contains(&m), "m = {m}");
    }

    #[test]
    fn bound_is_exact_for_affine_rhs_without_safety() {
        // f = 2 x(t-1) - 3 x(t-0.5) + t/2 around x(t) = sin t. The tube
        // supremum is max over τ of |f at the reference| + (|2| + |3|) ρ,
        // attained by the sign-pattern perturbations.
        let h = 0.05;
        let x = SampledFn::from_fn(-1.0, h, 60, 1, |t, out| out[0] = t.sin()).unwrap();
        let x0 = Trajectory::new(x, 0.0, 20).unwrap();
        let rho = 0.3;
        let tube = Tube::new(x0.clone(), rho, 0.0, 2.0).unwrap();
        let f = parse_rhs("2*x[1](t-1) - 3*x[1](t-0.5) + 0.5*t", 1.0).unwrap();
        let m = estimate_bound_with_safety(&f, &tube, 3, 1.0).unwrap();

        let mut exact: f64 = 0.0;
        for tau in tube.time_nodes() {
            let base = 2.0 * (tau - 1.0).sin() - 3.0 * (tau - 0.5).sin() + 0.5 * tau;
            exact = exact.max(base.abs() + 5.0 * rho);
        }
        assert!((m - exact).abs() <= 1e-9, "m = {m}, exact = {exact}");
    }

    proptest! {
        /// For affine right-hand sides the estimate grows with the radius.
        #[test]
        fn bound_monotone_in_radius_for_affine(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            c in -2.0f64..2.0,
            r1 in 0.01f64..2.0,
            scale in 1.0f64..4.0,
        ) {
            let r2 = r1 * scale;
            let x0 = const_traj(0.7, 0.0, 8, 0.125, 16);
            let src = format!("{a}*x[1](t-1) + {b}*x[1](t-0.5) + {c}");
            let f = parse_rhs(&src, 1.0).unwrap();
            let m1 = estimate_bound(&f, &Tube::new(x0.clone(), r1, 0.0, 2.0).unwrap(), 3).unwrap();
            let m2 = estimate_bound(&f, &Tube::new(x0, r2, 0.0, 2.0).unwrap(), 3).unwrap();
            prop_assert!(m1 <= m2 + 1e-12 * m2.abs().max(1.0), "m1 = {m1}, m2 = {m2}");
        }
    }

    #[test]
    fn add_scaled_builds_perturbed_family_member() {
        let f0 = parse_rhs("-x[1](t-1)", 1.0).unwrap();
        let g = parse_rhs("1", 1.0).unwrap();
        let fk = f0.add_scaled(&g, 0.125).unwrap();
        let seg = HistorySegment::constant(4, 0.25, &[1.0]).unwrap();
        let v = eval_rhs(&fk, 0.0, &seg).unwrap();
        assert!((v[0] - (-1.0 + 0.125)).abs() < 1e-15);
        assert_eq!(fk.sources()[0], "-x[1](t-1) + 0.125 * 1");
    }
}
