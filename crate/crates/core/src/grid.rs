//! Piecewise-linear functions on uniform time grids.
//!
//! Every function the solver touches is stored as node values on a uniform
//! grid `(t0, h)` and linearly interpolated in between. Domain lengths (the
//! delay `r`, step extents, horizons) are snapped to whole numbers of grid
//! steps when objects are built, so extracting a history segment or adding
//! two functions is an index shift, never a search. Sup norms and distances
//! are taken over grid nodes only; vector values use the max-abs norm.
//!
//! Non-goals: non-uniform grids, higher-order interpolants, and unbounded
//! delay are all out of scope.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Relative slack when locating a time on a grid. Queries within
/// `1e-9 * max(1, |t|)` of a node or of the domain edge are snapped rather
/// than rejected, which keeps node reads exact under float drift from
/// repeated `t0 + j*h` arithmetic.
pub const TIME_EPS: f64 = 1e-9;

fn time_tol(t: f64) -> f64 {
    TIME_EPS * t.abs().max(1.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("time {t} outside domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// Number of whole grid steps closest to `len / h`.
///
/// This is the snapping rule used everywhere a duration meets a grid:
/// `round`, not `floor`, so `0.5 / 1e-3` comes out as 500 despite float
/// representation error.
pub fn steps_of(len: f64, h: f64) -> usize {
    (len / h).round().max(0.0) as usize
}

/// A vector-valued function sampled on a uniform grid, linear in between.
///
/// Values are stored node-major: `values[j * dim + i]` is component `i` at
/// node `j`. A single-node function is allowed and means a zero-extent
/// domain; it shows up as the history segment of a delay-free problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SampledFnData", into = "SampledFnData")]
pub struct SampledFn {
    t0: f64,
    h: f64,
    dim: usize,
    values: Vec<f64>,
}

/// Serde mirror of [`SampledFn`]; re-validated on deserialization.
#[derive(Serialize, Deserialize, Clone)]
struct SampledFnData {
    t0: f64,
    h: f64,
    dim: usize,
    values: Vec<f64>,
}

impl From<SampledFn> for SampledFnData {
    fn from(f: SampledFn) -> Self {
        SampledFnData { t0: f.t0, h: f.h, dim: f.dim, values: f.values }
    }
}

impl TryFrom<SampledFnData> for SampledFn {
    type Error = GridError;
    fn try_from(d: SampledFnData) -> Result<Self, GridError> {
        SampledFn::new(d.t0, d.h, d.dim, d.values)
    }
}

impl SampledFn {
    pub fn new(t0: f64, h: f64, dim: usize, values: Vec<f64>) -> Result<Self, GridError> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(GridError::InvalidGrid(format!("step must be positive, got {h}")));
        }
        if dim == 0 {
            return Err(GridError::InvalidGrid("dim must be at least 1".into()));
        }
        if values.is_empty() || values.len() % dim != 0 {
            return Err(GridError::InvalidGrid(format!(
                "value buffer length {} is not a positive multiple of dim {}",
                values.len(),
                dim
            )));
        }
        if !t0.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(GridError::InvalidGrid("non-finite node value".into()));
        }
        Ok(SampledFn { t0, h, dim, values })
    }

    /// Sample `g` at `steps + 1` nodes starting at `t0`.
    pub fn from_fn(
        t0: f64,
        h: f64,
        steps: usize,
        dim: usize,
        mut g: impl FnMut(f64, &mut [f64]),
    ) -> Result<Self, GridError> {
        let n = steps + 1;
        let mut values = vec![0.0; n * dim];
        for j in 0..n {
            let t = t0 + j as f64 * h;
            g(t, &mut values[j * dim..(j + 1) * dim]);
        }
        Self::new(t0, h, dim, values)
    }

    pub fn constant(t0: f64, h: f64, steps: usize, value: &[f64]) -> Result<Self, GridError> {
        let dim = value.len();
        let mut values = Vec::with_capacity((steps + 1) * dim);
        for _ in 0..=steps {
            values.extend_from_slice(value);
        }
        Self::new(t0, h, dim, values)
    }

    pub fn start(&self) -> f64 {
        self.t0
    }

    pub fn end(&self) -> f64 {
        self.t0 + (self.nodes() - 1) as f64 * self.h
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Node count (one more than the number of steps spanned).
    pub fn nodes(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn node_time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.h
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Grid position of `t`: node index plus fractional offset in `[0, 1)`.
    /// Times within [`TIME_EPS`]-slack of a node snap to it exactly.
    fn locate(&self, t: f64) -> Result<(usize, f64), GridError> {
        let n = self.nodes();
        let u = (t - self.t0) / self.h;
        let tol = time_tol(t) / self.h;
        let last = (n - 1) as f64;
        if u < -tol || u > last + tol {
            return Err(GridError::OutOfDomain { t, start: self.start(), end: self.end() });
        }
        let r = u.round();
        if (u - r).abs() <= tol {
            return Ok(((r.max(0.0).min(last)) as usize, 0.0));
        }
        if n == 1 {
            return Err(GridError::OutOfDomain { t, start: self.start(), end: self.end() });
        }
        let j = (u.floor().max(0.0) as usize).min(n - 2);
        Ok((j, u - j as f64))
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<(), GridError> {
        let (j, w) = self.locate(t)?;
        let a = self.node(j);
        if w == 0.0 {
            out.copy_from_slice(a);
        } else {
            let b = self.node(j + 1);
            for i in 0..self.dim {
                out[i] = a[i] + w * (b[i] - a[i]);
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>, GridError> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_comp(&self, t: f64, comp: usize) -> Result<f64, GridError> {
        let (j, w) = self.locate(t)?;
        let a = self.values[j * self.dim + comp];
        if w == 0.0 {
            return Ok(a);
        }
        let b = self.values[(j + 1) * self.dim + comp];
        Ok(a + w * (b - a))
    }

    /// Max-abs value over all nodes and components.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn same_grid(&self, other: &SampledFn) -> Result<(), GridError> {
        if self.dim != other.dim {
            return Err(GridError::GridMismatch(format!(
                "dim {} vs {}",
                self.dim, other.dim
            )));
        }
        if (self.h - other.h).abs() > 1e-12 * self.h {
            return Err(GridError::GridMismatch(format!("step {} vs {}", self.h, other.h)));
        }
        if (self.t0 - other.t0).abs() > time_tol(self.t0) {
            return Err(GridError::GridMismatch(format!(
                "origin {} vs {}",
                self.t0, other.t0
            )));
        }
        if self.nodes() != other.nodes() {
            return Err(GridError::GridMismatch(format!(
                "node count {} vs {}",
                self.nodes(),
                other.nodes()
            )));
        }
        Ok(())
    }

    /// Write as CSV with header `t, x1, ..., xN`. Node values are printed in
    /// shortest round-trip form, so reading the file back reproduces every
    /// bit.
    pub fn to_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        write!(w, "t")?;
        for i in 1..=self.dim {
            write!(w, ", x{i}")?;
        }
        writeln!(w)?;
        for j in 0..self.nodes() {
            write!(w, "{}", self.node_time(j))?;
            for v in self.node(j) {
                write!(w, ", {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.to_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("csv output is ascii")
    }

    pub fn from_csv(r: &mut dyn BufRead) -> Result<Self, GridError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| GridError::Csv("empty input".into()))?
            .map_err(|e| GridError::Csv(e.to_string()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.is_empty() || cols[0] != "t" || cols.len() < 2 {
            return Err(GridError::Csv(format!("bad header: {header:?}")));
        }
        let dim = cols.len() - 1;
        for (i, c) in cols[1..].iter().enumerate() {
            if *c != format!("x{}", i + 1) {
                return Err(GridError::Csv(format!("bad header column: {c:?}")));
            }
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| GridError::Csv(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 1 {
                return Err(GridError::Csv(format!(
                    "row {}: expected {} fields, got {}",
                    lineno + 2,
                    dim + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| GridError::Csv(format!("row {}: bad number {s:?}", lineno + 2)))
            };
            times.push(parse(fields[0])?);
            for f in &fields[1..] {
                values.push(parse(f)?);
            }
        }
        if times.len() < 2 {
            return Err(GridError::Csv("need at least two data rows".into()));
        }
        let t0 = times[0];
        let h = times[1] - times[0];
        if !(h > 0.0) {
            return Err(GridError::Csv("times must be strictly increasing".into()));
        }
        for (j, t) in times.iter().enumerate() {
            let expect = t0 + j as f64 * h;
            if (t - expect).abs() > time_tol(*t).max(1e-9 * h) {
                return Err(GridError::Csv(format!("non-uniform time at row {}", j + 2)));
            }
        }
        SampledFn::new(t0, h, dim, values)
    }
}

/// Sup distance over grid nodes: `max_j max_i |a_ij - b_ij|`. Both functions
/// must live on the identical grid.
pub fn sup_dist(a: &SampledFn, b: &SampledFn) -> Result<f64, GridError> {
    a.same_grid(b)?;
    let mut m: f64 = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        m = m.max((x - y).abs());
    }
    Ok(m)
}

/// Initial history: a function whose domain is exactly `[-r, 0]`.
///
/// `r = 0` is allowed and degenerates to a single node, the plain-ODE case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySegment {
    f: SampledFn,
}

impl HistorySegment {
    /// Wrap a function as a history segment; its domain must end at 0.
    pub fn new(f: SampledFn) -> Result<Self, GridError> {
        if f.end().abs() > time_tol(f.end()) {
            return Err(GridError::InvalidGrid(format!(
                "history segment must end at 0, ends at {}",
                f.end()
            )));
        }
        Ok(HistorySegment { f })
    }

    /// Sample `g(θ)` on `θ ∈ [-r, 0]` with `r = delay_steps * h`.
    pub fn from_fn(
        delay_steps: usize,
        h: f64,
        dim: usize,
        mut g: impl FnMut(f64, &mut [f64]),
    ) -> Result<Self, GridError> {
        let t0 = -(delay_steps as f64 * h);
        // t0 + delay_steps*h reproduces exactly 0 since both terms share the
        // same product.
        Self::new(SampledFn::from_fn(t0, h, delay_steps, dim, |t, out| g(t, out))?)
    }

    pub fn constant(delay_steps: usize, h: f64, value: &[f64]) -> Result<Self, GridError> {
        let t0 = -(delay_steps as f64 * h);
        Self::new(SampledFn::constant(t0, h, delay_steps, value)?)
    }

    pub fn as_fn(&self) -> &SampledFn {
        &self.f
    }

    pub fn delay_steps(&self) -> usize {
        self.f.nodes() - 1
    }

    pub fn r(&self) -> f64 {
        self.delay_steps() as f64 * self.f.step()
    }

    pub fn step(&self) -> f64 {
        self.f.step()
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    pub fn eval(&self, theta: f64) -> Result<Vec<f64>, GridError> {
        self.f.eval(theta)
    }

    pub fn eval_comp(&self, theta: f64, comp: usize) -> Result<f64, GridError> {
        self.f.eval_comp(theta, comp)
    }

    /// Value at `θ = 0`, the present end of the history.
    pub fn last(&self) -> &[f64] {
        self.f.node(self.f.nodes() - 1)
    }

    pub fn sup_norm(&self) -> f64 {
        self.f.sup_norm()
    }

    pub fn sup_dist_to(&self, other: &HistorySegment) -> Result<f64, GridError> {
        sup_dist(&self.f, &other.f)
    }
}

/// A solution path on `[σ - r, σ + a]`: history followed by forward motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    f: SampledFn,
    sigma: f64,
    delay_steps: usize,
}

impl Trajectory {
    pub fn new(f: SampledFn, sigma: f64, delay_steps: usize) -> Result<Self, GridError> {
        if f.nodes() <= delay_steps {
            return Err(GridError::InvalidGrid(format!(
                "trajectory with {} nodes cannot hold a {}-step history",
                f.nodes(),
                delay_steps
            )));
        }
        let expect_start = sigma - delay_steps as f64 * f.step();
        if (f.start() - expect_start).abs() > time_tol(expect_start) {
            return Err(GridError::InvalidGrid(format!(
                "trajectory must start at σ - r = {expect_start}, starts at {}",
                f.start()
            )));
        }
        Ok(Trajectory { f, sigma, delay_steps })
    }

    pub fn as_fn(&self) -> &SampledFn {
        &self.f
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn r(&self) -> f64 {
        self.delay_steps as f64 * self.f.step()
    }

    /// Forward extent `a` (length of the domain past `σ`).
    pub fn extent(&self) -> f64 {
        self.extent_steps() as f64 * self.f.step()
    }

    pub fn extent_steps(&self) -> usize {
        self.f.nodes() - 1 - self.delay_steps
    }

    pub fn step(&self) -> f64 {
        self.f.step()
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>, GridError> {
        self.f.eval(t)
    }

    pub fn eval_comp(&self, t: f64, comp: usize) -> Result<f64, GridError> {
        self.f.eval_comp(t, comp)
    }

    /// The state `x_t`: the history segment `θ ↦ x(t + θ)`, `θ ∈ [-r, 0]`.
    ///
    /// Exact node copies when `t` is a grid node, interpolation otherwise.
    pub fn segment_at(&self, t: f64) -> Result<HistorySegment, GridError> {
        if t < self.sigma - time_tol(t) || t > self.f.end() + time_tol(t) {
            return Err(GridError::OutOfDomain { t, start: self.sigma, end: self.f.end() });
        }
        let dim = self.f.dim();
        let k = self.delay_steps;
        let h = self.f.step();
        let (j, w) = self.f.locate(t)?;
        let mut values = vec![0.0; (k + 1) * dim];
        if w == 0.0 {
            // t sits on node j; the segment is nodes j-k ..= j.
            let lo = (j - k) * dim;
            values.copy_from_slice(&self.f.values[lo..lo + (k + 1) * dim]);
        } else {
            for i in 0..=k {
                let theta = (i as f64 - k as f64) * h;
                self.f.eval_into(t + theta, &mut values[i * dim..(i + 1) * dim])?;
            }
        }
        let t0 = -(k as f64 * h);
        HistorySegment::new(SampledFn::new(t0, h, dim, values)?)
    }
}

/// Extend a history forward by `steps` grid steps, holding the value at
/// `θ = 0` constant. This is the zeroth approximation the fixed-point
/// operator integrates against.
pub fn frozen_extension(
    phi: &HistorySegment,
    sigma: f64,
    steps: usize,
) -> Result<Trajectory, GridError> {
    let dim = phi.dim();
    let k = phi.delay_steps();
    let h = phi.step();
    let mut values = Vec::with_capacity((k + steps + 1) * dim);
    values.extend_from_slice(phi.as_fn().values());
    let last = phi.last().to_vec();
    for _ in 0..steps {
        values.extend_from_slice(&last);
    }
    let t0 = sigma - k as f64 * h;
    Trajectory::new(SampledFn::new(t0, h, dim, values)?, sigma, k)
}

/// A perturbation-from-history function on `[-r, a]`, identically zero on
/// `[-r, 0]`. The fixed-point iteration runs over these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaFn {
    f: SampledFn,
    delay_steps: usize,
}

impl EtaFn {
    pub fn zero(delay_steps: usize, h: f64, dim: usize, a_steps: usize) -> Self {
        let t0 = -(delay_steps as f64 * h);
        let f = SampledFn::new(t0, h, dim, vec![0.0; (delay_steps + a_steps + 1) * dim])
            .expect("zero grid is valid");
        EtaFn { f, delay_steps }
    }

    /// Build from forward node values on `[0, a]`; `forward` holds
    /// `a_steps + 1` nodes starting at `t = 0`, whose first node must be 0.
    pub fn from_forward(
        delay_steps: usize,
        h: f64,
        dim: usize,
        forward: &[f64],
    ) -> Result<Self, GridError> {
        if forward.len() < dim || forward.len() % dim != 0 {
            return Err(GridError::InvalidGrid("bad forward buffer length".into()));
        }
        if forward[..dim].iter().any(|v| *v != 0.0) {
            return Err(GridError::InvalidGrid("value at t = 0 must be zero".into()));
        }
        let t0 = -(delay_steps as f64 * h);
        let mut values = vec![0.0; delay_steps * dim];
        values.extend_from_slice(forward);
        Ok(EtaFn { f: SampledFn::new(t0, h, dim, values)?, delay_steps })
    }

    pub fn as_fn(&self) -> &SampledFn {
        &self.f
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn r(&self) -> f64 {
        self.delay_steps as f64 * self.f.step()
    }

    pub fn a_steps(&self) -> usize {
        self.f.nodes() - 1 - self.delay_steps
    }

    pub fn a(&self) -> f64 {
        self.a_steps() as f64 * self.f.step()
    }

    pub fn step(&self) -> f64 {
        self.f.step()
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>, GridError> {
        self.f.eval(t)
    }

    pub fn eval_comp(&self, t: f64, comp: usize) -> Result<f64, GridError> {
        self.f.eval_comp(t, comp)
    }

    /// Forward node values including the zero node at `t = 0`.
    pub fn forward(&self) -> &[f64] {
        &self.f.values()[self.delay_steps * self.f.dim()..]
    }

    pub fn sup_norm(&self) -> f64 {
        self.f.sup_norm()
    }

    /// Membership in the candidate set: zero history and sup norm strictly
    /// below `beta`.
    pub fn is_admissible(&self, beta: f64) -> bool {
        let dim = self.f.dim();
        let history = &self.f.values()[..=self.delay_steps * dim + (dim - 1)];
        history.iter().all(|v| *v == 0.0) && self.sup_norm() < beta
    }

    pub fn sup_dist_to(&self, other: &EtaFn) -> Result<f64, GridError> {
        sup_dist(&self.f, &other.f)
    }
}

/// The state seen by the right-hand side at forward time `t`: the segment of
/// `xref + η` ending at `t`, where `xref` is a frozen-history reference and
/// `η` is measured relative to it. With `η = 0` and `t = 0` this is exactly
/// the original history.
pub fn compose_state(
    xref: &Trajectory,
    eta: &EtaFn,
    t: f64,
) -> Result<HistorySegment, GridError> {
    let h = xref.step();
    if (h - eta.step()).abs() > 1e-12 * h {
        return Err(GridError::GridMismatch(format!("step {} vs {}", h, eta.step())));
    }
    if xref.delay_steps() != eta.delay_steps() {
        return Err(GridError::GridMismatch(format!(
            "history length {} vs {} steps",
            xref.delay_steps(),
            eta.delay_steps()
        )));
    }
    if xref.dim() != eta.dim() {
        return Err(GridError::GridMismatch(format!("dim {} vs {}", xref.dim(), eta.dim())));
    }
    if t < -time_tol(t) || t > eta.a() + time_tol(t) {
        return Err(GridError::OutOfDomain { t, start: 0.0, end: eta.a() });
    }
    let k = xref.delay_steps();
    let dim = xref.dim();
    let u = t / h;
    let m = u.round();
    let mut values = vec![0.0; (k + 1) * dim];
    if (u - m).abs() <= time_tol(t) / h
        && (m as usize) + k < xref.as_fn().nodes()
        && (m as usize) + k < eta.as_fn().nodes()
    {
        // Node-aligned fast path: both grids share origin σ - r (resp. -r),
        // so the segment is the same index window in each.
        let m = m as usize;
        let lo = m * dim;
        let hi = lo + (k + 1) * dim;
        let xs = &xref.as_fn().values()[lo..hi];
        let es = &eta.as_fn().values()[lo..hi];
        for i in 0..values.len() {
            values[i] = xs[i] + es[i];
        }
    } else {
        let sigma = xref.sigma();
        let mut tmp = vec![0.0; dim];
        for j in 0..=k {
            let theta = (j as f64 - k as f64) * h;
            xref.as_fn().eval_into(sigma + t + theta, &mut values[j * dim..(j + 1) * dim])?;
            eta.as_fn().eval_into(t + theta, &mut tmp)?;
            for i in 0..dim {
                values[j * dim + i] += tmp[i];
            }
        }
    }
    HistorySegment::new(SampledFn::new(-(k as f64 * h), h, dim, values)?)
}
