//! JSON run documents and their resolution into core objects.
//!
//! Resolution order for every knob: command-line flag, then document field,
//! then the built-in default. Whatever wins is echoed verbatim into the run
//! manifest, so a report directory always records the exact configuration
//! that produced it.
//!
//! Every failure is an [`InputError`] carrying the input path plus either
//! serde's line/column or a field-path prefix — a bad document dies with a
//! message that points at the offending spot, never a panic.

use std::collections::BTreeMap;

use fde_core::{
    CoeffRule, DependenceConfig, FamilySpec, FourierConfig, HistorySegment, LabConfig,
    ProblemSpec, Rhs, SampledFn, ScalarExpr, SolverConfig,
};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_TUBE_RADIUS: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
#[error("{file}: {detail}")]
pub struct InputError {
    pub file: String,
    pub detail: String,
}

impl InputError {
    pub fn new(file: &str, detail: impl Into<String>) -> Self {
        InputError { file: file.to_string(), detail: detail.into() }
    }
}

/// Flag-level overrides. `seed` stays `None` when the flag is absent so each
/// command can keep its own default.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub h: Option<f64>,
    pub tol: Option<f64>,
    pub k_max: Option<usize>,
    pub radius: Option<f64>,
    pub seed: Option<u64>,
}

pub fn parse_doc<T: DeserializeOwned>(file: &str, text: &str) -> Result<T, InputError> {
    serde_json::from_str(text).map_err(|e| InputError::new(file, format!("invalid JSON: {e}")))
}

/// One expression or a list of them — scalar problems may drop the brackets.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ExprList {
    One(String),
    Many(Vec<String>),
}

impl ExprList {
    pub fn sources(&self) -> Vec<String> {
        match self {
            ExprList::One(s) => vec![s.clone()],
            ExprList::Many(v) => v.clone(),
        }
    }
}

/// Initial history: expression(s) in `theta` over `[-r, 0]`, or explicit
/// node rows on the history grid.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PhiDoc {
    Expr(String),
    Exprs(Vec<String>),
    Nodes(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDoc {
    pub sigma: f64,
    pub r: f64,
    pub phi: PhiDoc,
    pub rhs: ExprList,
    pub horizon: f64,
    pub h: f64,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub tube_radius: Option<f64>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// A problem document with all knobs resolved, ready to assemble.
pub struct ResolvedProblem {
    pub sigma: f64,
    pub r_steps: usize,
    pub phi: HistorySegment,
    pub rhs: Rhs,
    pub horizon: f64,
    pub h: f64,
    pub solver: SolverConfig,
    pub params: BTreeMap<String, f64>,
    /// Echo of the resolved knobs for the manifest.
    pub config: Value,
}

fn solver_config_json(cfg: &SolverConfig) -> Value {
    json!({
        "tube_radius": cfg.tube_radius,
        "tol": cfg.tol,
        "beta_bar": cfg.beta_bar,
        "max_iter": cfg.max_iter,
        "sample_density": cfg.sample_density,
    })
}

fn check_finite(file: &str, name: &str, v: f64) -> Result<(), InputError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(InputError::new(file, format!("{name} must be finite, got {v}")))
    }
}

/// Sample per-component expressions in `theta` on the history grid
/// `θ_j = -(k - j)·h`; the last node lands on 0 exactly.
fn sample_phi_exprs(
    file: &str,
    sources: &[String],
    r_steps: usize,
    h: f64,
    params: &BTreeMap<String, f64>,
) -> Result<Vec<f64>, InputError> {
    let dim = sources.len();
    let exprs: Vec<ScalarExpr> = sources
        .iter()
        .map(|s| {
            ScalarExpr::parse(s, &["theta"], params)
                .map_err(|e| InputError::new(file, format!("phi: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let mut values = Vec::with_capacity((r_steps + 1) * dim);
    for j in 0..=r_steps {
        let theta = -((r_steps - j) as f64) * h;
        for e in &exprs {
            let v = e
                .eval(&[theta])
                .map_err(|er| InputError::new(file, format!("phi at theta = {theta}: {er}")))?;
            if !v.is_finite() {
                return Err(InputError::new(
                    file,
                    format!("phi is not finite at theta = {theta}"),
                ));
            }
            values.push(v);
        }
    }
    Ok(values)
}

pub fn resolve_problem(
    file: &str,
    doc: &ProblemDoc,
    ovr: &Overrides,
) -> Result<ResolvedProblem, InputError> {
    let h = ovr.h.unwrap_or(doc.h);
    if !(h > 0.0 && h.is_finite()) {
        return Err(InputError::new(file, format!("h must be positive and finite, got {h}")));
    }
    check_finite(file, "sigma", doc.sigma)?;
    check_finite(file, "horizon", doc.horizon)?;
    if !(doc.r >= 0.0 && doc.r.is_finite()) {
        return Err(InputError::new(file, format!("r must be nonnegative, got {}", doc.r)));
    }
    let r_steps = (doc.r / h).round() as usize;
    if (doc.r - r_steps as f64 * h).abs() > 1e-9 * doc.r.max(1.0) {
        return Err(InputError::new(
            file,
            format!("r = {} is not a whole number of steps of h = {h}", doc.r),
        ));
    }

    let sources = doc.rhs.sources();
    let rhs = Rhs::parse(&sources, doc.r, &doc.params)
        .map_err(|e| InputError::new(file, format!("rhs: {e}")))?;
    let dim = rhs.dim();

    let values = match &doc.phi {
        PhiDoc::Expr(s) => {
            if dim != 1 {
                return Err(InputError::new(
                    file,
                    format!("phi is a single expression but the system has {dim} components"),
                ));
            }
            sample_phi_exprs(file, std::slice::from_ref(s), r_steps, h, &doc.params)?
        }
        PhiDoc::Exprs(v) => {
            if v.len() != dim {
                return Err(InputError::new(
                    file,
                    format!("phi has {} expressions, rhs has {dim} components", v.len()),
                ));
            }
            sample_phi_exprs(file, v, r_steps, h, &doc.params)?
        }
        PhiDoc::Nodes(rows) => {
            if rows.len() != r_steps + 1 {
                return Err(InputError::new(
                    file,
                    format!(
                        "phi has {} node rows, the history grid has {} nodes",
                        rows.len(),
                        r_steps + 1
                    ),
                ));
            }
            let mut values = Vec::with_capacity((r_steps + 1) * dim);
            for (j, row) in rows.iter().enumerate() {
                if row.len() != dim {
                    return Err(InputError::new(
                        file,
                        format!("phi node row {j} has {} entries, expected {dim}", row.len()),
                    ));
                }
                for &v in row {
                    if !v.is_finite() {
                        return Err(InputError::new(file, format!("phi node row {j} is not finite")));
                    }
                    values.push(v);
                }
            }
            values
        }
    };
    let phi = SampledFn::new(-(r_steps as f64) * h, h, dim, values)
        .and_then(HistorySegment::new)
        .map_err(|e| InputError::new(file, format!("phi: {e}")))?;

    let tol = ovr.tol.or(doc.tol).unwrap_or(DEFAULT_TOL);
    let radius = ovr.radius.or(doc.tube_radius).unwrap_or(DEFAULT_TUBE_RADIUS);
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(InputError::new(file, format!("tol must be positive, got {tol}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(InputError::new(file, format!("tube_radius must be positive, got {radius}")));
    }
    let solver = SolverConfig::new(radius, tol);

    let config = json!({
        "sigma": doc.sigma,
        "r": doc.r,
        "rhs": sources,
        "horizon": doc.horizon,
        "h": h,
        "dim": dim,
        "params": doc.params,
        "solver": solver_config_json(&solver),
    });
    Ok(ResolvedProblem {
        sigma: doc.sigma,
        r_steps,
        phi,
        rhs,
        horizon: doc.horizon,
        h,
        solver,
        params: doc.params.clone(),
        config,
    })
}

impl ResolvedProblem {
    pub fn spec(&self, file: &str) -> Result<ProblemSpec, InputError> {
        ProblemSpec::new(
            self.sigma,
            self.phi.clone(),
            std::sync::Arc::new(self.rhs.clone()),
            self.horizon,
            self.h,
        )
        .map_err(|e| InputError::new(file, e.to_string()))
    }
}

/// Coefficient rule: a name or `{"expr": "..."}` in the variable `k`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CoeffDoc {
    Named(String),
    Expr { expr: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyDoc {
    pub base: ProblemDoc,
    pub count: usize,
    pub a_prime: f64,
    /// Right-hand-side drift g, added as c_k·g.
    #[serde(default)]
    pub g: Option<ExprList>,
    /// History drift ψ, expression(s) in `theta`, added as c_k·ψ.
    #[serde(default)]
    pub psi: Option<ExprList>,
    /// Start-time drift: σ_k = σ + c_k·s.
    #[serde(default)]
    pub s: f64,
    #[serde(default)]
    pub c: Option<CoeffDoc>,
    #[serde(default)]
    pub eps_ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub tail: Option<usize>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub check_uniqueness: Option<bool>,
}

pub struct ResolvedFamily {
    pub spec: FamilySpec,
    pub a_prime: f64,
    pub cfg: DependenceConfig,
    pub config: Value,
}

pub fn resolve_family(
    file: &str,
    doc: &FamilyDoc,
    ovr: &Overrides,
) -> Result<ResolvedFamily, InputError> {
    let base = resolve_problem(file, &doc.base, ovr)?;
    let count = ovr.k_max.unwrap_or(doc.count);
    if count < 1 {
        return Err(InputError::new(file, "count must be at least 1"));
    }
    if !(doc.a_prime > 0.0 && doc.a_prime <= base.horizon) {
        return Err(InputError::new(
            file,
            format!("a_prime must lie in (0, horizon], got {}", doc.a_prime),
        ));
    }

    let mut spec = FamilySpec::new(
        base.sigma,
        base.phi.clone(),
        base.rhs.clone(),
        base.horizon,
        base.h,
        count,
    )
    .map_err(|e| InputError::new(file, e.to_string()))?;

    let g_sources = doc.g.as_ref().map(|g| g.sources());
    if let Some(sources) = &g_sources {
        let g = Rhs::parse(sources, doc.base.r, &base.params)
            .map_err(|e| InputError::new(file, format!("g: {e}")))?;
        spec = spec.with_rhs_drift(g).map_err(|e| InputError::new(file, format!("g: {e}")))?;
    }
    let psi_sources = doc.psi.as_ref().map(|p| p.sources());
    if let Some(sources) = &psi_sources {
        let psi: Vec<ScalarExpr> = sources
            .iter()
            .map(|s| {
                ScalarExpr::parse(s, &["theta"], &base.params)
                    .map_err(|e| InputError::new(file, format!("psi: {e}")))
            })
            .collect::<Result<_, _>>()?;
        spec = spec.with_phi_drift(psi).map_err(|e| InputError::new(file, format!("psi: {e}")))?;
    }
    if doc.s != 0.0 {
        spec = spec
            .with_sigma_drift(doc.s)
            .map_err(|e| InputError::new(file, format!("s: {e}")))?;
    }

    let (rule, c_echo) = match &doc.c {
        None => (CoeffRule::Reciprocal, json!("reciprocal")),
        Some(CoeffDoc::Named(name)) => match name.as_str() {
            "null" => (CoeffRule::Null, json!("null")),
            "reciprocal" => (CoeffRule::Reciprocal, json!("reciprocal")),
            other => {
                return Err(InputError::new(
                    file,
                    format!("c: unknown rule {other:?}, expected \"null\", \"reciprocal\" or {{\"expr\": …}}"),
                ))
            }
        },
        Some(CoeffDoc::Expr { expr }) => {
            let e = ScalarExpr::parse(expr, &["k"], &base.params)
                .map_err(|e| InputError::new(file, format!("c: {e}")))?;
            (CoeffRule::Expr(e), json!({ "expr": expr }))
        }
    };
    spec = spec.with_coeff(rule);

    let mut cfg = DependenceConfig::new(base.solver.clone());
    if let Some(ladder) = &doc.eps_ladder {
        cfg.eps_ladder = ladder.clone();
    }
    cfg.tail = doc.tail;
    cfg.delta = doc.delta;
    if let Some(min_seed) = ovr.seed {
        cfg.seed = min_seed;
    }
    if let Some(u) = doc.check_uniqueness {
        cfg.check_uniqueness = u;
    }

    let config = json!({
        "base": base.config,
        "count": count,
        "a_prime": doc.a_prime,
        "g": g_sources,
        "psi": psi_sources,
        "s": doc.s,
        "c": c_echo,
        "eps_ladder": cfg.eps_ladder,
        "tail": cfg.tail,
        "delta": cfg.delta.unwrap_or(base.solver.tube_radius),
        "seed": cfg.seed,
        "check_uniqueness": cfg.check_uniqueness,
    });
    Ok(ResolvedFamily { spec, a_prime: doc.a_prime, cfg, config })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierDoc {
    /// The 2π-periodic field, an expression in `x`.
    pub f: String,
    pub c0: f64,
    pub horizon: f64,
    pub orders: Vec<usize>,
    pub h: f64,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub tube_radius: Option<f64>,
    #[serde(default)]
    pub quad_points: Option<usize>,
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

pub struct ResolvedFourier {
    pub f: std::sync::Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub c0: f64,
    pub horizon: f64,
    pub orders: Vec<usize>,
    pub cfg: FourierConfig,
    pub config: Value,
}

pub fn resolve_fourier(
    file: &str,
    doc: &FourierDoc,
    ovr: &Overrides,
) -> Result<ResolvedFourier, InputError> {
    let h = ovr.h.unwrap_or(doc.h);
    if !(h > 0.0 && h.is_finite()) {
        return Err(InputError::new(file, format!("h must be positive and finite, got {h}")));
    }
    check_finite(file, "c0", doc.c0)?;
    if !(doc.horizon > 0.0 && doc.horizon.is_finite()) {
        return Err(InputError::new(file, format!("horizon must be positive, got {}", doc.horizon)));
    }
    if doc.orders.is_empty() || doc.orders.windows(2).any(|w| w[1] <= w[0]) {
        return Err(InputError::new(file, "orders must be non-empty and strictly increasing"));
    }
    let expr = ScalarExpr::parse(&doc.f, &["x"], &doc.params)
        .map_err(|e| InputError::new(file, format!("f: {e}")))?;
    // Evaluation faults surface as NaN; the coefficient pass rejects them
    // with the sample location attached.
    let f = std::sync::Arc::new(move |x: f64| expr.eval(&[x]).unwrap_or(f64::NAN));

    let tol = ovr.tol.or(doc.tol).unwrap_or(DEFAULT_TOL);
    let radius = ovr.radius.or(doc.tube_radius).unwrap_or(DEFAULT_TUBE_RADIUS);
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(InputError::new(file, format!("tol must be positive, got {tol}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(InputError::new(file, format!("tube_radius must be positive, got {radius}")));
    }
    let mut cfg = FourierConfig::new(SolverConfig::new(radius, tol), h);
    if let Some(q) = doc.quad_points {
        cfg.quad_points = q;
    }
    if let Some(g) = doc.grid {
        cfg.grid = g;
    }

    let config = json!({
        "f": doc.f,
        "c0": doc.c0,
        "horizon": doc.horizon,
        "orders": doc.orders,
        "h": h,
        "quad_points": cfg.quad_points,
        "grid": cfg.grid,
        "params": doc.params,
        "solver": solver_config_json(&cfg.solver),
    });
    Ok(ResolvedFourier { f, c0: doc.c0, horizon: doc.horizon, orders: doc.orders.clone(), cfg, config })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqDoc {
    /// Member expression in the point coordinates plus `k`:
    /// `x` for an interval, `x1 … xd` for a box.
    pub family: String,
    /// Claimed limit, an expression in the point coordinates.
    pub limit: String,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub k_max: usize,
    #[serde(default)]
    pub points: Option<usize>,
    #[serde(default)]
    pub fine: Option<usize>,
    #[serde(default)]
    pub eps_ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub tail: Option<usize>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

pub struct ResolvedSeq {
    pub family: fde_core::ExprFamily,
    pub k_max: usize,
    pub space: fde_core::BoxSpace,
    pub cfg: LabConfig,
    pub config: Value,
}

pub fn resolve_seq(file: &str, doc: &SeqDoc, ovr: &Overrides) -> Result<ResolvedSeq, InputError> {
    let dim = doc.lo.len();
    if dim == 0 || doc.hi.len() != dim {
        return Err(InputError::new(file, "lo and hi must be non-empty and the same length"));
    }
    let names: Vec<String> = if dim == 1 {
        vec!["x".into()]
    } else {
        (1..=dim).map(|i| format!("x{i}")).collect()
    };
    let limit_vars: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut member_vars = limit_vars.clone();
    member_vars.push("k");

    let member = ScalarExpr::parse(&doc.family, &member_vars, &doc.params)
        .map_err(|e| InputError::new(file, format!("family: {e}")))?;
    let limit = ScalarExpr::parse(&doc.limit, &limit_vars, &doc.params)
        .map_err(|e| InputError::new(file, format!("limit: {e}")))?;
    let family = fde_core::ExprFamily::new(member, limit, dim)
        .map_err(|e| InputError::new(file, e.to_string()))?;

    let k_max = ovr.k_max.unwrap_or(doc.k_max);
    if k_max < 2 {
        return Err(InputError::new(file, format!("k_max must be at least 2, got {k_max}")));
    }
    let points = doc.points.unwrap_or(33);
    let fine = doc.fine.unwrap_or(257);
    let space = fde_core::BoxSpace::new(doc.lo.clone(), doc.hi.clone(), points, fine)
        .map_err(|e| InputError::new(file, e.to_string()))?;

    let mut cfg = LabConfig::default();
    if let Some(ladder) = &doc.eps_ladder {
        cfg.eps_ladder = ladder.clone();
    }
    cfg.tail = doc.tail;

    let config = json!({
        "family": doc.family,
        "limit": doc.limit,
        "lo": doc.lo,
        "hi": doc.hi,
        "k_max": k_max,
        "points": points,
        "fine": fine,
        "params": doc.params,
        "lab": cfg,
    });
    Ok(ResolvedSeq { family, k_max, space, cfg, config })
}
