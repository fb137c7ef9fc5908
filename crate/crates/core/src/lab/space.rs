//! Sample spaces the convergence checkers run over: boxes in R^d and the
//! `(t, segment)` tube around a reference trajectory.
//!
//! A space provides deterministic base points, a metric, probe candidates
//! near a point, and directional offsets for geometric approach sequences.
//! Everything is reproducible — no randomness anywhere in probe generation.

use crate::grid::{HistorySegment, SampledFn, Trajectory};
use crate::lab::LabError;
use serde_json::json;

pub trait SampleSpace: Sync {
    type Point: Clone + Send + Sync;

    /// Base sample set (coarse grid).
    fn points(&self) -> Vec<Self::Point>;

    /// Denser grid for sup-norm style checks; defaults to the base set.
    fn fine_points(&self) -> Vec<Self::Point> {
        self.points()
    }

    fn dist(&self, a: &Self::Point, b: &Self::Point) -> f64;

    /// Deterministic probe candidates at distance in `(0, radius)` from `x`.
    fn near(&self, x: &Self::Point, radius: f64) -> Vec<Self::Point>;

    /// Number of approach directions for geometric probe sequences.
    fn n_dirs(&self) -> usize;

    /// The point at distance ≤ `dist` from `x` along direction `dir`,
    /// clipped to the space.
    fn offset(&self, x: &Self::Point, dir: usize, dist: f64) -> Self::Point;

    /// Reference length scale (used to shrink probe windows as 1/n).
    fn scale(&self) -> f64;

    fn describe(&self, x: &Self::Point) -> serde_json::Value;
}

/// Dyadic offset magnitudes `2^-1 .. 2^-14` used for probe candidates.
pub(crate) const DYADIC_J_MAX: u32 = 14;

// ------------------------------------------------------------------- boxes --

/// An axis-aligned box in R^d sampled on uniform grids, with the sup metric.
#[derive(Debug, Clone)]
pub struct BoxSpace {
    lo: Vec<f64>,
    hi: Vec<f64>,
    points_per_axis: usize,
    fine_per_axis: usize,
}

impl BoxSpace {
    pub fn new(
        lo: Vec<f64>,
        hi: Vec<f64>,
        points_per_axis: usize,
        fine_per_axis: usize,
    ) -> Result<Self, LabError> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(LabError::Invalid("box bounds must be non-empty and same length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(LabError::Invalid("box bounds must satisfy lo < hi".into()));
        }
        if points_per_axis < 2 || fine_per_axis < points_per_axis {
            return Err(LabError::Invalid("need at least 2 points per axis, fine ≥ coarse".into()));
        }
        Ok(BoxSpace { lo, hi, points_per_axis, fine_per_axis })
    }

    /// `[0, 1]` with the default 33-point base grid and 257-point fine grid.
    pub fn unit_interval() -> Self {
        Self::interval(0.0, 1.0)
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        Self::new(vec![lo], vec![hi], 33, 257).expect("static bounds are valid")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn grid(&self, per_axis: usize) -> Vec<Vec<f64>> {
        // Cartesian product of per-axis uniform grids, lexicographic order.
        let d = self.dim();
        let mut out = Vec::new();
        let mut idx = vec![0usize; d];
        loop {
            let p: Vec<f64> = (0..d)
                .map(|i| {
                    self.lo[i] + (self.hi[i] - self.lo[i]) * idx[i] as f64 / (per_axis - 1) as f64
                })
                .collect();
            out.push(p);
            let mut axis = d;
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < per_axis {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }

    fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a - 1e-12 && *v <= *b + 1e-12)
    }

    /// Axis-adjacent pairs on the fine grid, for continuity estimates of a
    /// declared limit.
    pub fn adjacent_fine_pairs(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        for p in self.grid(self.fine_per_axis) {
            for i in 0..self.dim() {
                let step = (self.hi[i] - self.lo[i]) / (self.fine_per_axis - 1) as f64;
                let mut q = p.clone();
                q[i] += step;
                if q[i] <= self.hi[i] + 1e-12 {
                    out.push((p.clone(), q));
                }
            }
        }
        out
    }
}

impl SampleSpace for BoxSpace {
    type Point = Vec<f64>;

    fn points(&self) -> Vec<Vec<f64>> {
        self.grid(self.points_per_axis)
    }

    fn fine_points(&self) -> Vec<Vec<f64>> {
        self.grid(self.fine_per_axis)
    }

    fn dist(&self, a: &Vec<f64>, b: &Vec<f64>) -> f64 {
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    fn near(&self, x: &Vec<f64>, radius: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        // Dyadic offsets along each axis (absolute scale, matching the
        // default δ ladder), kept only when they stay inside the box.
        for i in 0..self.dim() {
            for j in 1..=DYADIC_J_MAX {
                let off = 2f64.powi(-(j as i32));
                if off >= radius {
                    continue;
                }
                for sign in [1.0, -1.0] {
                    let mut t = x.clone();
                    t[i] += sign * off;
                    if self.contains(&t) {
                        out.push(t);
                    }
                }
            }
        }
        // Base grid points inside the ball.
        for t in self.points() {
            let d = self.dist(x, &t);
            if d > 0.0 && d < radius {
                out.push(t);
            }
        }
        out
    }

    fn n_dirs(&self) -> usize {
        2 * self.dim()
    }

    fn offset(&self, x: &Vec<f64>, dir: usize, dist: f64) -> Vec<f64> {
        let axis = dir / 2;
        let sign = if dir % 2 == 0 { 1.0 } else { -1.0 };
        let mut t = x.clone();
        t[axis] = (t[axis] + sign * dist).clamp(self.lo[axis], self.hi[axis]);
        t
    }

    fn scale(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .fold(0.0f64, |m, (a, b)| m.max(0.5 * (b - a)))
    }

    fn describe(&self, x: &Vec<f64>) -> serde_json::Value {
        json!(x)
    }
}

// -------------------------------------------------------------------- tube --

/// A point of the `(t, ψ)` state space: a time and a history segment.
#[derive(Debug, Clone)]
pub struct TubePoint {
    pub t: f64,
    pub seg: HistorySegment,
}

/// The closed `radius`-tube around `{(t, x⁰_t) : t ∈ [t_start, t_end]}`,
/// with the product metric `max(|Δt|, sup‖Δψ‖)`.
#[derive(Debug, Clone)]
pub struct TubeSpace {
    x0: Trajectory,
    radius: f64,
    t_start: f64,
    t_end: f64,
    time_samples: usize,
}

impl TubeSpace {
    pub fn new(x0: Trajectory, radius: f64, t_start: f64, t_end: f64) -> Result<Self, LabError> {
        if !(radius > 0.0) {
            return Err(LabError::Invalid(format!("tube radius must be positive, got {radius}")));
        }
        let tol = 1e-9 * t_end.abs().max(1.0);
        if t_start < x0.sigma() - tol || t_end > x0.as_fn().end() + tol || t_start >= t_end {
            return Err(LabError::Invalid(format!(
                "window [{t_start}, {t_end}] not inside trajectory forward range"
            )));
        }
        Ok(TubeSpace { x0, radius, t_start, t_end, time_samples: 17 })
    }

    pub fn with_time_samples(mut self, n: usize) -> Self {
        self.time_samples = n.max(2);
        self
    }

    pub fn x0(&self) -> &Trajectory {
        &self.x0
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn time_nodes(&self) -> Vec<f64> {
        let f = self.x0.as_fn();
        let h = f.step();
        let j_lo = ((self.t_start - f.start()) / h).round() as usize;
        let j_hi = ((self.t_end - f.start()) / h).round() as usize;
        let count = self.time_samples.min(j_hi - j_lo + 1).max(2);
        (0..count)
            .map(|i| {
                let j = j_lo + ((i * (j_hi - j_lo)) as f64 / (count - 1) as f64).round() as usize;
                f.node_time(j)
            })
            .collect()
    }

    fn base_at(&self, t: f64) -> HistorySegment {
        self.x0.segment_at(t).expect("tube window inside trajectory range")
    }

    fn bump(seg: &HistorySegment, comp: usize, node: Option<usize>, amp: f64) -> HistorySegment {
        let f = seg.as_fn();
        let dim = f.dim();
        let mut values = f.values().to_vec();
        match node {
            // Constant shift of one component.
            None => {
                for j in 0..f.nodes() {
                    values[j * dim + comp] += amp;
                }
            }
            // Single-node hat.
            Some(j) => values[j * dim + comp] += amp,
        }
        HistorySegment::new(SampledFn::new(f.start(), f.step(), dim, values).expect("finite bump"))
            .expect("bump preserves the domain")
    }

    fn clamp_t(&self, t: f64) -> f64 {
        t.clamp(self.t_start, self.t_end)
    }

    /// Move a point to a new base time, carrying its perturbation along.
    fn rebase(&self, p: &TubePoint, t_new: f64) -> TubePoint {
        let old_base = self.base_at(p.t);
        let new_base = self.base_at(t_new);
        let dim = old_base.dim();
        let mut values = new_base.as_fn().values().to_vec();
        for (i, v) in values.iter_mut().enumerate() {
            *v += p.seg.as_fn().values()[i] - old_base.as_fn().values()[i];
        }
        let f = new_base.as_fn();
        let seg = HistorySegment::new(
            SampledFn::new(f.start(), f.step(), dim, values).expect("rebase keeps grid"),
        )
        .expect("rebase keeps domain");
        TubePoint { t: t_new, seg }
    }
}

impl SampleSpace for TubeSpace {
    type Point = TubePoint;

    fn points(&self) -> Vec<TubePoint> {
        let dim = self.x0.dim();
        let center = self.x0.delay_steps() / 2;
        let mut out = Vec::new();
        for t in self.time_nodes() {
            let base = self.base_at(t);
            out.push(TubePoint { t, seg: base.clone() });
            for comp in 0..dim {
                for amp in [self.radius, -self.radius] {
                    out.push(TubePoint { t, seg: Self::bump(&base, comp, None, amp) });
                    out.push(TubePoint { t, seg: Self::bump(&base, comp, Some(center), amp) });
                }
            }
        }
        out
    }

    fn dist(&self, a: &TubePoint, b: &TubePoint) -> f64 {
        let seg_d = a.seg.sup_dist_to(&b.seg).expect("tube segments share one grid");
        (a.t - b.t).abs().max(seg_d)
    }

    fn near(&self, x: &TubePoint, radius: f64) -> Vec<TubePoint> {
        let mut out = Vec::new();
        for j in 1..=3u32 {
            let d = radius * 2f64.powi(-(j as i32));
            for dir in 0..self.n_dirs() {
                let p = self.offset(x, dir, d);
                let dd = self.dist(x, &p);
                if dd > 0.0 && dd < radius {
                    out.push(p);
                }
            }
        }
        out
    }

    fn n_dirs(&self) -> usize {
        // time ±, then per component: constant shift ±, centre hat ±.
        2 + 4 * self.x0.dim()
    }

    fn offset(&self, x: &TubePoint, dir: usize, dist: f64) -> TubePoint {
        match dir {
            0 => self.rebase(x, self.clamp_t(x.t + dist)),
            1 => self.rebase(x, self.clamp_t(x.t - dist)),
            _ => {
                let q = dir - 2;
                let comp = q / 4;
                let kind = q % 4;
                let center = self.x0.delay_steps() / 2;
                let (node, amp) = match kind {
                    0 => (None, dist),
                    1 => (None, -dist),
                    2 => (Some(center), dist),
                    _ => (Some(center), -dist),
                };
                TubePoint { t: x.t, seg: Self::bump(&x.seg, comp, node, amp) }
            }
        }
    }

    fn scale(&self) -> f64 {
        (0.5 * (self.t_end - self.t_start)).max(self.radius)
    }

    fn describe(&self, x: &TubePoint) -> serde_json::Value {
        json!({
            "t": x.t,
            "segment_start": x.seg.as_fn().start(),
            "segment_step": x.seg.as_fn().step(),
            "segment_values": x.seg.as_fn().values(),
        })
    }
}
