//! Falsification lab for convergence notions on function sequences.
//!
//! Every check here runs a finite, deterministic search and returns a
//! [`Verdict`]: `Refuted` carries a concrete, replayable witness (a true
//! counterexample up to float error), while `ConsistentUpTo` only says the
//! search at the recorded resolution found nothing — it is *not* a proof of
//! convergence.

mod bound;
mod checks;
mod space;

pub use bound::{random_tube_max, uniform_bound_on_tube, TubeBoundReport};
pub use checks::{
    check_continuous_convergence, check_exhaustive, check_generalized_cont_convergence,
    check_pointwise, check_uniform_on_compacta, check_weak_exhaustive,
};
pub use space::{BoxSpace, SampleSpace, TubePoint, TubeSpace};

use crate::rhs::{EvalError, RhsError, RhsEval, ScalarExpr, SegmentView};
use serde::Serialize;
use serde_json::json;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Rhs(#[from] RhsError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error("probe leaves its domain at index {index} ({detail})")]
    ProbeOutOfDomain { index: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
}

/// Sup distance between two value vectors.
pub(crate) fn rho(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

// ---------------------------------------------------------------- families --

/// An indexed family k ↦ f_k (k = 1, 2, …) together with its declared
/// candidate limit f₀, evaluable at sample points of type `P`.
pub trait Family<P>: Sync {
    fn val_dim(&self) -> usize;
    fn eval_into(&self, k: usize, p: &P, out: &mut [f64]) -> Result<(), EvalError>;
    fn limit_into(&self, p: &P, out: &mut [f64]) -> Result<(), EvalError>;
}

/// A family together with the largest index the checkers materialize.
#[derive(Clone, Copy)]
pub struct FnSeq<'a, P> {
    family: &'a dyn Family<P>,
    k_max: usize,
}

impl<'a, P> FnSeq<'a, P> {
    pub fn new(family: &'a dyn Family<P>, k_max: usize) -> Self {
        assert!(k_max >= 2, "k_max must be at least 2");
        FnSeq { family, k_max }
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn val_dim(&self) -> usize {
        self.family.val_dim()
    }

    pub fn eval(&self, k: usize, p: &P) -> Result<Vec<f64>, EvalError> {
        debug_assert!((1..=self.k_max).contains(&k));
        let mut out = vec![0.0; self.family.val_dim()];
        self.family.eval_into(k, p, &mut out)?;
        Ok(out)
    }

    pub fn limit(&self, p: &P) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.family.val_dim()];
        self.family.limit_into(p, &mut out)?;
        Ok(out)
    }
}

/// Scalar family over box points backed by plain closures.
pub struct ScalarFamily<F, G> {
    f: F,
    f0: G,
}

impl<F, G> ScalarFamily<F, G>
where
    F: Fn(usize, &[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(f: F, f0: G) -> Self {
        ScalarFamily { f, f0 }
    }
}

impl<F, G> Family<Vec<f64>> for ScalarFamily<F, G>
where
    F: Fn(usize, &[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> f64 + Sync,
{
    fn val_dim(&self) -> usize {
        1
    }

    fn eval_into(&self, k: usize, p: &Vec<f64>, out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = (self.f)(k, p);
        Ok(())
    }

    fn limit_into(&self, p: &Vec<f64>, out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = (self.f0)(p);
        Ok(())
    }
}

/// Scalar family over box points backed by parsed expressions: the member
/// expression sees the point coordinates plus `k` as its last variable.
pub struct ExprFamily {
    member: ScalarExpr,
    limit: ScalarExpr,
    dim: usize,
}

impl ExprFamily {
    pub fn new(member: ScalarExpr, limit: ScalarExpr, dim: usize) -> Result<Self, LabError> {
        if dim == 0 {
            return Err(LabError::Invalid("point dimension must be positive".into()));
        }
        Ok(ExprFamily { member, limit, dim })
    }
}

impl Family<Vec<f64>> for ExprFamily {
    fn val_dim(&self) -> usize {
        1
    }

    fn eval_into(&self, k: usize, p: &Vec<f64>, out: &mut [f64]) -> Result<(), EvalError> {
        debug_assert_eq!(p.len(), self.dim);
        let mut vals = Vec::with_capacity(self.dim + 1);
        vals.extend_from_slice(p);
        vals.push(k as f64);
        out[0] = self.member.eval(&vals)?;
        Ok(())
    }

    fn limit_into(&self, p: &Vec<f64>, out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = self.limit.eval(p)?;
        Ok(())
    }
}

/// Vector family over tube points backed by right-hand sides: `members[0]`
/// is the limit f₀ and `members[k]` is f_k.
pub struct RhsFamily {
    members: Vec<Arc<dyn RhsEval>>,
}

impl RhsFamily {
    pub fn new(members: Vec<Arc<dyn RhsEval>>) -> Result<Self, LabError> {
        if members.len() < 2 {
            return Err(LabError::Invalid("need the limit plus at least one member".into()));
        }
        let dim = members[0].dim();
        if members.iter().any(|m| m.dim() != dim) {
            return Err(LabError::Invalid("family members must share one dimension".into()));
        }
        Ok(RhsFamily { members })
    }

    pub fn k_max(&self) -> usize {
        self.members.len() - 1
    }
}

impl Family<TubePoint> for RhsFamily {
    fn val_dim(&self) -> usize {
        self.members[0].dim()
    }

    fn eval_into(&self, k: usize, p: &TubePoint, out: &mut [f64]) -> Result<(), EvalError> {
        self.members[k].eval_into(p.t, &SegmentView(&p.seg), out)
    }

    fn limit_into(&self, p: &TubePoint, out: &mut [f64]) -> Result<(), EvalError> {
        self.members[0].eval_into(p.t, &SegmentView(&p.seg), out)
    }
}

// ---------------------------------------------------------------- verdicts --

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VerdictTag {
    Refuted,
    ConsistentUpTo,
}

/// What a stored gap compares, so a witness can be replayed standalone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GapKind {
    /// ρ(f_index(probe), f₀(probe)) — pointwise / uniform gaps.
    MemberVsLimit,
    /// ρ(f_index(base), f_index(probe)) — exhaustiveness gaps.
    MemberPair,
    /// ρ(f_index(probe), f₀(base)) — continuous-convergence gaps.
    ProbeVsLimit,
}

#[derive(Debug, Clone)]
pub struct Hit<P> {
    pub kind: GapKind,
    pub probe: P,
    pub index: usize,
    pub gap: f64,
    pub delta: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Witness<P> {
    pub base: P,
    pub hits: Vec<Hit<P>>,
}

impl<P> Witness<P> {
    /// Largest recorded gap.
    pub fn gap(&self) -> f64 {
        self.hits.iter().fold(0.0f64, |m, h| m.max(h.gap))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Resolution {
    pub k_max: usize,
    pub tail: usize,
    pub points: usize,
    pub eps_ladder: Vec<f64>,
    pub delta_ladder: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Verdict<P> {
    pub tag: VerdictTag,
    pub witness: Option<Witness<P>>,
    pub resolution: Resolution,
}

impl<P> Verdict<P> {
    pub fn refuted(&self) -> bool {
        self.tag == VerdictTag::Refuted
    }

    pub fn to_json<S: SampleSpace<Point = P>>(&self, space: &S) -> serde_json::Value {
        json!({
            "tag": self.tag,
            "resolution": self.resolution,
            "witness": self.witness.as_ref().map(|w| json!({
                "base": space.describe(&w.base),
                "hits": w.hits.iter().map(|h| json!({
                    "kind": h.kind,
                    "probe": space.describe(&h.probe),
                    "index": h.index,
                    "gap": h.gap,
                    "delta": h.delta,
                    "eps": h.eps,
                })).collect::<Vec<_>>(),
            })),
        })
    }
}

/// Recompute the gap a stored hit refers to.  Refuted witnesses must
/// reproduce their reported gap within 1e−12.
pub fn replay_gap<P>(seq: &FnSeq<'_, P>, base: &P, hit: &Hit<P>) -> Result<f64, LabError> {
    Ok(match hit.kind {
        GapKind::MemberVsLimit => rho(&seq.eval(hit.index, &hit.probe)?, &seq.limit(&hit.probe)?),
        GapKind::MemberPair => rho(&seq.eval(hit.index, base)?, &seq.eval(hit.index, &hit.probe)?),
        GapKind::ProbeVsLimit => rho(&seq.eval(hit.index, &hit.probe)?, &seq.limit(base)?),
    })
}

// ------------------------------------------------------------------ config --

#[derive(Debug, Clone, Serialize)]
pub struct LabConfig {
    pub eps_ladder: Vec<f64>,
    pub delta_ladder: Vec<f64>,
    /// Tail window length; `None` means k_max / 2.
    pub tail: Option<usize>,
    pub pointwise_eps: f64,
    pub uniform_eps: f64,
    pub cc_eps: f64,
    pub probes_per_point: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            eps_ladder: vec![1e-1, 1e-2, 1e-3],
            delta_ladder: (1..=12).map(|j| 2f64.powi(-j)).collect(),
            tail: None,
            pointwise_eps: 1e-1,
            uniform_eps: 1e-1,
            cc_eps: 1e-1,
            probes_per_point: 1,
        }
    }
}

impl LabConfig {
    pub fn tail_for(&self, k_max: usize) -> usize {
        self.tail.unwrap_or(k_max / 2).min(k_max - 1).max(1)
    }
}

// ---------------------------------------------------------------- registry --

/// One convergence notion, checkable against a family over a sample space.
pub trait ConvergenceCheck<S: SampleSpace>: Sync {
    fn name(&self) -> &'static str;
    fn run(
        &self,
        seq: &FnSeq<'_, S::Point>,
        space: &S,
        cfg: &LabConfig,
    ) -> Result<Verdict<S::Point>, LabError>;
}

pub struct PointwiseCheck;
pub struct ExhaustiveCheck;
pub struct WeakExhaustiveCheck;
pub struct ContConvCheck;
pub struct UniformOnCompactaCheck;

impl<S: SampleSpace> ConvergenceCheck<S> for PointwiseCheck {
    fn name(&self) -> &'static str {
        "pointwise"
    }
    fn run(
        &self,
        seq: &FnSeq<'_, S::Point>,
        space: &S,
        cfg: &LabConfig,
    ) -> Result<Verdict<S::Point>, LabError> {
        check_pointwise(seq, &space.points(), cfg.pointwise_eps, cfg.tail_for(seq.k_max()))
    }
}

impl<S: SampleSpace> ConvergenceCheck<S> for ExhaustiveCheck {
    fn name(&self) -> &'static str {
        "exhaustive"
    }
    fn run(
        &self,
        seq: &FnSeq<'_, S::Point>,
        space: &S,
        cfg: &LabConfig,
    ) -> Result<Verdict<S::Point>, LabError> {
        check_exhaustive(
            seq,
            space,
            &space.points(),
            &cfg.eps_ladder,
            &cfg.delta_ladder,
            cfg.tail_for(seq.k_max()),
        )
    }
}

impl<S: SampleSpace> ConvergenceCheck<S> for WeakExhaustiveCheck {
    fn name(&self) -> &'static str {
        "weak-exhaustive"
    }
    fn run(
        &self,
        seq: &FnSeq<'_, S::Point>,
        space: &S,
        cfg: &LabConfig,
    ) -> Result<Verdict<S::Point>, LabError> {
        check_weak_exhaustive(
            seq,
            space,
            &space.points(),
            &cfg.eps_ladder,
            &cfg.delta_ladder,
            cfg.tail_for(seq.k_max()),
        )
    }
}

impl<S: SampleSpace> ConvergenceCheck<S> for ContConvCheck {
    fn name(&self) -> &'static str {
        "continuous-convergence"
    }
    fn run(
        &self,
        seq: &FnSeq<'_, S::Point>,
        space: &S,
        cfg: &LabConfig,
    ) -> Result<Verdict<S::Point>, LabError> {
        check_continuous_convergence(
            seq,
            space,
            &space.points(),
            cfg.probes_per_point,
            cfg.cc_eps,
            cfg.tail_for(seq.k_max()),
        )
    }
}

impl<S: SampleSpace> ConvergenceCheck<S> for UniformOnCompactaCheck {
    fn name(&self) -> &'static str {
        "uniform-on-compacta"
    }
    fn run(
        &self,
        seq: &FnSeq<'_, S::Point>,
        space: &S,
        cfg: &LabConfig,
    ) -> Result<Verdict<S::Point>, LabError> {
        check_uniform_on_compacta(seq, &space.fine_points(), cfg.uniform_eps, cfg.tail_for(seq.k_max()))
    }
}

/// Strategy registry over the convergence notions; `standard()` holds the
/// five notions of the battery in a fixed order.
pub struct CheckerRegistry<S: SampleSpace> {
    checkers: Vec<Box<dyn ConvergenceCheck<S>>>,
}

impl<S: SampleSpace> CheckerRegistry<S> {
    pub fn standard() -> Self {
        CheckerRegistry {
            checkers: vec![
                Box::new(PointwiseCheck),
                Box::new(ExhaustiveCheck),
                Box::new(WeakExhaustiveCheck),
                Box::new(ContConvCheck),
                Box::new(UniformOnCompactaCheck),
            ],
        }
    }

    pub fn push(&mut self, checker: Box<dyn ConvergenceCheck<S>>) {
        self.checkers.push(checker);
    }

    pub fn run_all(
        &self,
        seq: &FnSeq<'_, S::Point>,
        space: &S,
        cfg: &LabConfig,
    ) -> Result<Vec<(&'static str, Verdict<S::Point>)>, LabError> {
        self.checkers
            .iter()
            .map(|c| Ok((c.name(), c.run(seq, space, cfg)?)))
            .collect()
    }
}

// ------------------------------------------------------------- cross-check --

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyMatrix {
    pub verdicts: Vec<(String, VerdictTag)>,
    pub limit_continuous_on_samples: bool,
    /// Verdict combinations that contradict an implication between the
    /// notions — a checker bug or a resolution artifact, flagged loudly.
    pub inconsistencies: Vec<String>,
}

impl ConsistencyMatrix {
    pub fn get(&self, name: &str) -> Option<VerdictTag> {
        self.verdicts.iter().find(|(n, _)| n == name).map(|(_, t)| *t)
    }

    pub fn consistent_up_to(&self, name: &str) -> bool {
        self.get(name) == Some(VerdictTag::ConsistentUpTo)
    }
}

/// Runs the standard battery and asserts the implications between the
/// notions at verdict level:
/// continuous convergence ⇔ pointwise ∧ exhaustive;
/// pointwise ∧ weakly exhaustive ⇒ limit continuous (on samples);
/// continuous convergence ⇒ uniform convergence on compacta.
pub fn cross_check(
    seq: &FnSeq<'_, Vec<f64>>,
    space: &BoxSpace,
    cfg: &LabConfig,
) -> Result<ConsistencyMatrix, LabError> {
    let registry = CheckerRegistry::standard();
    let results = registry.run_all(seq, space, cfg)?;
    let verdicts: Vec<(String, VerdictTag)> =
        results.iter().map(|(n, v)| (n.to_string(), v.tag)).collect();
    let ok = |name: &str| {
        verdicts.iter().find(|(n, _)| n == name).map(|(_, t)| *t == VerdictTag::ConsistentUpTo)
            .expect("standard battery ran")
    };

    // Continuity of the declared limit, estimated from adjacent fine-grid
    // gaps against the battery's coarse tolerance.
    let mut limit_cont = true;
    for (a, b) in space.adjacent_fine_pairs() {
        if rho(&seq.limit(&a)?, &seq.limit(&b)?) > cfg.cc_eps {
            limit_cont = false;
            break;
        }
    }

    let mut inconsistencies = Vec::new();
    let (pw, exh, weak, cc, unif) = (
        ok("pointwise"),
        ok("exhaustive"),
        ok("weak-exhaustive"),
        ok("continuous-convergence"),
        ok("uniform-on-compacta"),
    );
    if cc != (pw && exh) {
        inconsistencies.push(format!(
            "continuous convergence ({}) must match pointwise ∧ exhaustive ({})",
            cc,
            pw && exh
        ));
    }
    if pw && weak && !limit_cont {
        inconsistencies
            .push("pointwise ∧ weakly exhaustive, yet the declared limit looks discontinuous".into());
    }
    if cc && !unif {
        inconsistencies
            .push("continuous convergence without uniform convergence on compacta".into());
    }
    Ok(ConsistencyMatrix { verdicts, limit_continuous_on_samples: limit_cont, inconsistencies })
}
