//! Uniform bound extraction on a tube: finds M with |f_k(τ, ψ)| ≤ M for all
//! (τ, ψ) in the δ/2-tube around a reference trajectory and all k past a
//! stabilization index k0.

use crate::grid::{HistorySegment, SampledFn, Trajectory};
use crate::lab::LabError;
use crate::rhs::{estimate_bound_with_safety, RhsEval, SegmentView, Tube};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Safety factor applied on top of the observed maximum.
const TUBE_BOUND_SAFETY: f64 = 1.25;

#[derive(Debug, Clone)]
pub struct TubeBoundReport {
    /// Inflated uniform bound: observed max × 1.25.
    pub m: f64,
    /// Smallest tail index at which the running max is within 5% of final.
    pub k0: usize,
    /// The tube V₁ the bound was certified on.
    pub tube: Tube,
    /// Raw per-index maxima for the sampled indices (0 plus the tail).
    pub per_k: Vec<(usize, f64)>,
}

/// Samples |f_k| for k ∈ {K/2, …, K} ∪ {0} (index 0 is the limit f₀) over
/// the δ/2-tube around `x0` on `[σ₀, σ₀ + a′]` and returns the inflated max.
///
/// Evaluation failures are surfaced — they signal that the tube leaves some
/// member's evaluable domain.
pub fn uniform_bound_on_tube(
    fks: &[Arc<dyn RhsEval>],
    x0: &Trajectory,
    delta: f64,
    a_prime: f64,
    sample_density: usize,
) -> Result<TubeBoundReport, LabError> {
    if fks.len() < 2 {
        return Err(LabError::Invalid("need the limit plus at least one member".into()));
    }
    if !(delta > 0.0) || !(a_prime > 0.0) {
        return Err(LabError::Invalid(format!(
            "delta and a_prime must be positive, got {delta}, {a_prime}"
        )));
    }
    let k_max = fks.len() - 1;
    let k_lo = (k_max / 2).max(1);
    let tube = Tube::new(x0.clone(), delta / 2.0, x0.sigma(), x0.sigma() + a_prime)?;

    let mut per_k = Vec::with_capacity(k_max - k_lo + 2);
    per_k.push((0usize, estimate_bound_with_safety(fks[0].as_ref(), &tube, sample_density, 1.0)?));
    for k in k_lo..=k_max {
        per_k.push((k, estimate_bound_with_safety(fks[k].as_ref(), &tube, sample_density, 1.0)?));
    }

    let raw_max = per_k.iter().fold(0.0f64, |m, (_, v)| m.max(*v));
    // Running max over the tail only; k0 is where it stabilizes within 5%.
    let tail: Vec<&(usize, f64)> = per_k.iter().filter(|(k, _)| *k >= k_lo).collect();
    let final_running = tail.iter().fold(0.0f64, |m, (_, v)| m.max(*v));
    let mut k0 = k_lo;
    let mut running = 0.0f64;
    for (k, v) in &tail {
        running = running.max(*v);
        if running >= 0.95 * final_running {
            k0 = *k;
            break;
        }
    }
    Ok(TubeBoundReport { m: raw_max * TUBE_BOUND_SAFETY, k0, tube, per_k })
}

/// Max of |f_k| over `n_samples` random points of the tube, drawing k
/// uniformly from [k_lo, K].  Fresh randomness per seed; used to cross-check
/// the deterministic bound.
pub fn random_tube_max(
    fks: &[Arc<dyn RhsEval>],
    tube: &Tube,
    k_lo: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64, LabError> {
    let k_max = fks.len() - 1;
    if k_lo > k_max {
        return Err(LabError::Invalid(format!("k_lo {k_lo} exceeds largest index {k_max}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = tube.x0();
    let dim = x0.dim();
    let radius = tube.radius();
    let mut worst = 0.0f64;
    let mut out = vec![0.0; dim];
    for _ in 0..n_samples {
        let t = rng.random_range(tube.t_start()..=tube.t_end());
        let base = x0.segment_at(t)?;
        let f = base.as_fn();
        let mut values = f.values().to_vec();
        for v in values.iter_mut() {
            // Node-wise offsets within ±radius keep the sup distance ≤ radius.
            *v += rng.random_range(-radius..=radius);
        }
        let seg = HistorySegment::new(SampledFn::new(f.start(), f.step(), dim, values)?)?;
        let k = rng.random_range(k_lo..=k_max);
        fks[k].eval_into(t, &SegmentView(&seg), &mut out)?;
        for v in &out {
            if !v.is_finite() {
                return Err(LabError::Invalid("non-finite value on tube sample".into()));
            }
            worst = worst.max(v.abs());
        }
    }
    Ok(worst)
}
