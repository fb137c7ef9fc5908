//! The falsification checkers: pointwise, exhaustive, weakly exhaustive,
//! continuous convergence (plus the varying-domain variant), and uniform
//! convergence on compacta.
//!
//! Every checker scans deterministic probe sets and returns `Refuted` with a
//! replayable witness, or `ConsistentUpTo` the ladders/grids it was given.
//! Refuted is the only strong verdict; ConsistentUpTo is not a proof.

use crate::lab::space::SampleSpace;
use crate::lab::{FnSeq, GapKind, Hit, LabError, Resolution, Verdict, VerdictTag, Witness};

fn resolution<P>(seq: &FnSeq<'_, P>, points: usize, eps: &[f64], delta: &[f64], tail: usize) -> Resolution {
    Resolution {
        k_max: seq.k_max(),
        tail,
        points,
        eps_ladder: eps.to_vec(),
        delta_ladder: delta.to_vec(),
    }
}

fn sorted_desc(ladder: &[f64]) -> Vec<f64> {
    let mut l = ladder.to_vec();
    l.sort_by(|a, b| b.partial_cmp(a).expect("finite ladder"));
    l
}

/// Refuted if some tail member misses the declared limit by more than `eps`
/// at a sample point.
pub fn check_pointwise<P: Clone>(
    seq: &FnSeq<'_, P>,
    points: &[P],
    eps: f64,
    tail: usize,
) -> Result<Verdict<P>, LabError> {
    let n_lo = seq.k_max() - tail;
    let res = resolution(seq, points.len(), &[eps], &[], tail);
    let mut worst: Option<(usize, &P, f64)> = None;
    for x in points {
        let fx = seq.limit(x)?;
        for n in n_lo..=seq.k_max() {
            let gap = crate::lab::rho(&seq.eval(n, x)?, &fx);
            if gap > eps && worst.map_or(true, |(_, _, g)| gap > g) {
                worst = Some((n, x, gap));
            }
        }
    }
    Ok(match worst {
        Some((n, x, gap)) => Verdict {
            tag: VerdictTag::Refuted,
            witness: Some(Witness {
                base: x.clone(),
                hits: vec![Hit {
                    kind: GapKind::MemberVsLimit,
                    probe: x.clone(),
                    index: n,
                    gap,
                    delta: None,
                    eps: Some(eps),
                }],
            }),
            resolution: res,
        },
        None => Verdict { tag: VerdictTag::ConsistentUpTo, witness: None, resolution: res },
    })
}

/// Refuted if the sup over the grid of |f_k − f₀| exceeds `eps` for some
/// tail index k.
pub fn check_uniform_on_compacta<P: Clone>(
    seq: &FnSeq<'_, P>,
    grid: &[P],
    eps: f64,
    tail: usize,
) -> Result<Verdict<P>, LabError> {
    let n_lo = seq.k_max() - tail;
    let res = resolution(seq, grid.len(), &[eps], &[], tail);
    let mut worst: Option<(usize, &P, f64)> = None;
    for x in grid {
        let fx = seq.limit(x)?;
        for n in n_lo..=seq.k_max() {
            let gap = crate::lab::rho(&seq.eval(n, x)?, &fx);
            if gap > eps && worst.map_or(true, |(_, _, g)| gap > g) {
                worst = Some((n, x, gap));
            }
        }
    }
    Ok(match worst {
        Some((n, x, gap)) => Verdict {
            tag: VerdictTag::Refuted,
            witness: Some(Witness {
                base: x.clone(),
                hits: vec![Hit {
                    kind: GapKind::MemberVsLimit,
                    probe: x.clone(),
                    index: n,
                    gap,
                    delta: None,
                    eps: Some(eps),
                }],
            }),
            resolution: res,
        },
        None => Verdict { tag: VerdictTag::ConsistentUpTo, witness: None, resolution: res },
    })
}

/// Per-base-point table of probe values over the tail window, shared by the
/// exhaustive and weakly exhaustive scans.
struct ProbeTable<P> {
    probes: Vec<P>,
    dist: Vec<f64>,
    /// vals[p][n − n_lo] = f_n(probe p)
    vals: Vec<Vec<Vec<f64>>>,
    /// base_vals[n − n_lo] = f_n(x)
    base_vals: Vec<Vec<f64>>,
    limit_base: Vec<f64>,
    limit_probe: Vec<Vec<f64>>,
}

fn probe_table<S: SampleSpace>(
    seq: &FnSeq<'_, S::Point>,
    space: &S,
    x: &S::Point,
    radius: f64,
    n_lo: usize,
    with_limits: bool,
) -> Result<ProbeTable<S::Point>, LabError> {
    let probes = space.near(x, radius);
    let dist: Vec<f64> = probes.iter().map(|t| space.dist(x, t)).collect();
    let mut vals = Vec::with_capacity(probes.len());
    let mut limit_probe = Vec::new();
    for t in &probes {
        let mut col = Vec::with_capacity(seq.k_max() - n_lo + 1);
        for n in n_lo..=seq.k_max() {
            col.push(seq.eval(n, t)?);
        }
        vals.push(col);
        if with_limits {
            limit_probe.push(seq.limit(t)?);
        }
    }
    let mut base_vals = Vec::with_capacity(seq.k_max() - n_lo + 1);
    for n in n_lo..=seq.k_max() {
        base_vals.push(seq.eval(n, x)?);
    }
    let limit_base = if with_limits { seq.limit(x)? } else { Vec::new() };
    Ok(ProbeTable { probes, dist, vals, base_vals, limit_base, limit_probe })
}

/// Definition 2.1(b) style scan.  For each sample x and each ε, a scale δ is
/// *accepted* when every sampled t with d(x,t) < δ keeps ρ(f_n(x), f_n(t)) < ε
/// across the whole tail window (the latest admissible threshold index).
/// (x, ε) is refuted when instead every δ in the ladder contains a violating
/// (t, n) pair.
pub fn check_exhaustive<S: SampleSpace>(
    seq: &FnSeq<'_, S::Point>,
    space: &S,
    points: &[S::Point],
    eps_ladder: &[f64],
    delta_ladder: &[f64],
    tail: usize,
) -> Result<Verdict<S::Point>, LabError> {
    let eps_ladder = sorted_desc(eps_ladder);
    let delta_ladder = sorted_desc(delta_ladder);
    let n_lo = seq.k_max() - tail;
    let res = resolution(seq, points.len(), &eps_ladder, &delta_ladder, tail);

    for x in points {
        let table = probe_table(seq, space, x, delta_ladder[0], n_lo, false)?;
        for &eps in &eps_ladder {
            let mut hits: Vec<Hit<S::Point>> = Vec::new();
            let mut accepted = false;
            for &delta in &delta_ladder {
                // Worst violating pair inside this δ-ball, if any.
                let mut worst: Option<(usize, usize, f64)> = None;
                let mut any_probe = false;
                for (p, d) in table.dist.iter().enumerate() {
                    if *d >= delta {
                        continue;
                    }
                    any_probe = true;
                    for (off, v) in table.vals[p].iter().enumerate() {
                        let gap = crate::lab::rho(&table.base_vals[off], v);
                        if gap >= eps && worst.map_or(true, |(_, _, g)| gap > g) {
                            worst = Some((p, n_lo + off, gap));
                        }
                    }
                }
                match worst {
                    Some((p, n, gap)) => hits.push(Hit {
                        kind: GapKind::MemberPair,
                        probe: table.probes[p].clone(),
                        index: n,
                        gap,
                        delta: Some(delta),
                        eps: Some(eps),
                    }),
                    // A quiet δ (or one with no probes at all) settles (x, ε).
                    None => {
                        let _ = any_probe;
                        accepted = true;
                        break;
                    }
                }
            }
            if !accepted {
                return Ok(Verdict {
                    tag: VerdictTag::Refuted,
                    witness: Some(Witness { base: x.clone(), hits }),
                    resolution: res,
                });
            }
        }
    }
    Ok(Verdict { tag: VerdictTag::ConsistentUpTo, witness: None, resolution: res })
}

/// Definition 2.1(c) style scan with per-probe threshold indices.  A probe t
/// is a persistent violator for (x, ε) when ρ(f_n(x), f_n(t)) ≥ ε across the
/// whole tail window *and* the declared limit keeps the gap:
/// ρ(f₀(x), f₀(t)) ≥ ε.  (Under the declared pointwise convergence a gap that
/// survives every threshold index must survive into the limit, so the limit
/// condition filters out finite-tail truncation artifacts.)  (x, ε) is
/// refuted when every δ in the ladder contains a persistent violator.
pub fn check_weak_exhaustive<S: SampleSpace>(
    seq: &FnSeq<'_, S::Point>,
    space: &S,
    points: &[S::Point],
    eps_ladder: &[f64],
    delta_ladder: &[f64],
    tail: usize,
) -> Result<Verdict<S::Point>, LabError> {
    let eps_ladder = sorted_desc(eps_ladder);
    let delta_ladder = sorted_desc(delta_ladder);
    let n_lo = seq.k_max() - tail;
    let res = resolution(seq, points.len(), &eps_ladder, &delta_ladder, tail);

    for x in points {
        let table = probe_table(seq, space, x, delta_ladder[0], n_lo, true)?;
        for &eps in &eps_ladder {
            let mut hits: Vec<Hit<S::Point>> = Vec::new();
            let mut covered = true;
            for &delta in &delta_ladder {
                let mut found: Option<(usize, usize, f64)> = None;
                for (p, d) in table.dist.iter().enumerate() {
                    if *d >= delta {
                        continue;
                    }
                    let limit_gap = crate::lab::rho(&table.limit_base, &table.limit_probe[p]);
                    if limit_gap < eps {
                        continue;
                    }
                    let mut min_gap = f64::INFINITY;
                    let mut max_at = (0usize, 0.0f64);
                    for (off, v) in table.vals[p].iter().enumerate() {
                        let gap = crate::lab::rho(&table.base_vals[off], v);
                        min_gap = min_gap.min(gap);
                        if gap > max_at.1 {
                            max_at = (n_lo + off, gap);
                        }
                    }
                    if min_gap >= eps && found.map_or(true, |(_, _, g)| max_at.1 > g) {
                        found = Some((p, max_at.0, max_at.1));
                    }
                }
                match found {
                    Some((p, n, gap)) => hits.push(Hit {
                        kind: GapKind::MemberPair,
                        probe: table.probes[p].clone(),
                        index: n,
                        gap,
                        delta: Some(delta),
                        eps: Some(eps),
                    }),
                    None => {
                        covered = false;
                        break;
                    }
                }
            }
            if covered {
                return Ok(Verdict {
                    tag: VerdictTag::Refuted,
                    witness: Some(Witness { base: x.clone(), hits }),
                    resolution: res,
                });
            }
        }
    }
    Ok(Verdict { tag: VerdictTag::ConsistentUpTo, witness: None, resolution: res })
}

/// Shared core for the battery checkers: evaluate one probe track
/// n ↦ probe(n) and decide whether f_n(x_n) stays ≥ eps away from f₀(x) on
/// the tail.  The persistence guard (the final gap must stay within 60% of
/// the tail max) rejects tracks whose gaps are still decaying toward zero at
/// k_max instead of genuinely persisting.
fn refuted_track<P, F>(
    seq: &FnSeq<'_, P>,
    limit_at_base: &[f64],
    mut probe: F,
    n_lo: usize,
    eps: f64,
) -> Result<Option<(usize, P, f64)>, LabError>
where
    P: Clone,
    F: FnMut(usize) -> Result<P, LabError>,
{
    let mut tail_min = f64::INFINITY;
    let mut worst: Option<(usize, P, f64)> = None;
    let mut last_gap = 0.0;
    for n in n_lo..=seq.k_max() {
        let p = probe(n)?;
        let gap = crate::lab::rho(&seq.eval(n, &p)?, limit_at_base);
        tail_min = tail_min.min(gap);
        if worst.as_ref().map_or(true, |(_, _, g)| gap > *g) {
            worst = Some((n, p.clone(), gap));
        }
        last_gap = gap;
    }
    let max_gap = worst.as_ref().map_or(0.0, |(_, _, g)| *g);
    if tail_min >= eps && last_gap >= 0.6 * max_gap {
        Ok(worst)
    } else {
        Ok(None)
    }
}

/// Definition 2.1(a) style battery: constant probes, geometric approaches
/// along each direction, and adversarial probes arg-maximizing the limit gap
/// over a 1/n window around the base point.
pub fn check_continuous_convergence<S: SampleSpace>(
    seq: &FnSeq<'_, S::Point>,
    space: &S,
    points: &[S::Point],
    probes_per_point: usize,
    eps: f64,
    tail: usize,
) -> Result<Verdict<S::Point>, LabError> {
    if probes_per_point < 1 {
        return Err(LabError::Invalid("probes_per_point must be ≥ 1".into()));
    }
    let n_lo = seq.k_max() - tail;
    let res = resolution(seq, points.len(), &[eps], &[], tail);
    let scale = space.scale();

    for x in points {
        let fx = seq.limit(x)?;
        let mut tracks: Vec<Box<dyn FnMut(usize) -> Result<S::Point, LabError> + '_>> = Vec::new();
        // Constant probe.
        let xc = x.clone();
        tracks.push(Box::new(move |_n| Ok(xc.clone())));
        // Geometric approach along each direction: x_n = offset(x, dir, scale·2^{−n}).
        for dir in 0..space.n_dirs() {
            let xc = x.clone();
            tracks.push(Box::new(move |n| {
                let d = scale * 2f64.powi(-(n.min(1000) as i32));
                Ok(space.offset(&xc, dir, d))
            }));
        }
        // Adversarial probes: grid argmax of the limit gap over shrinking
        // windows w_n = 2·scale·2^{−q}/n (full diameter over n, so the m/8
        // sub-grid lands on 1/n-style spikes exactly).
        for q in 0..probes_per_point {
            let xc = x.clone();
            let fxc = fx.clone();
            tracks.push(Box::new(move |n| {
                let w = 2.0 * scale * 2f64.powi(-(q as i32)) / n as f64;
                let mut best = xc.clone();
                let mut best_gap = -1.0;
                let mut consider = |t: S::Point| -> Result<(), LabError> {
                    let gap = crate::lab::rho(&seq.eval(n, &t)?, &fxc);
                    if gap > best_gap {
                        best_gap = gap;
                        best = t;
                    }
                    Ok(())
                };
                consider(xc.clone())?;
                for dir in 0..space.n_dirs() {
                    for m in 1..=8 {
                        consider(space.offset(&xc, dir, w * m as f64 / 8.0))?;
                    }
                }
                for t in space.near(&xc, w) {
                    consider(t)?;
                }
                Ok(best)
            }));
        }

        for mut track in tracks {
            if let Some((n, p, gap)) = refuted_track(seq, &fx, &mut track, n_lo, eps)? {
                return Ok(Verdict {
                    tag: VerdictTag::Refuted,
                    witness: Some(Witness {
                        base: x.clone(),
                        hits: vec![Hit {
                            kind: GapKind::ProbeVsLimit,
                            probe: p,
                            index: n,
                            gap,
                            delta: None,
                            eps: Some(eps),
                        }],
                    }),
                    resolution: res,
                });
            }
        }
    }
    Ok(Verdict { tag: VerdictTag::ConsistentUpTo, witness: None, resolution: res })
}

/// Varying-domain continuous convergence ("Proposition" 2.6).  `probe_gen`
/// yields, for index n and a base point, one probe per track; every probe
/// must satisfy `member_domain(n, ·)`.
pub fn check_generalized_cont_convergence<P: Clone + Send + Sync>(
    seq: &FnSeq<'_, P>,
    bases: &[P],
    probe_gen: &dyn Fn(usize, &P) -> Vec<P>,
    member_domain: &dyn Fn(usize, &P) -> bool,
    eps: f64,
    tail: usize,
) -> Result<Verdict<P>, LabError> {
    let n_lo = seq.k_max() - tail;
    let res = resolution(seq, bases.len(), &[eps], &[], tail);
    for (bi, x) in bases.iter().enumerate() {
        let fx = seq.limit(x)?;
        let n_tracks = probe_gen(n_lo, x).len();
        for track in 0..n_tracks {
            let probe = |n: usize| -> Result<P, LabError> {
                let probes = probe_gen(n, x);
                let p = probes.into_iter().nth(track).ok_or_else(|| {
                    LabError::Invalid(format!("probe generator gave fewer tracks at index {n}"))
                })?;
                if !member_domain(n, &p) {
                    return Err(LabError::ProbeOutOfDomain {
                        index: n,
                        detail: format!("track {track} at base #{bi}"),
                    });
                }
                Ok(p)
            };
            if let Some((n, p, gap)) = refuted_track(seq, &fx, probe, n_lo, eps)? {
                return Ok(Verdict {
                    tag: VerdictTag::Refuted,
                    witness: Some(Witness {
                        base: x.clone(),
                        hits: vec![Hit {
                            kind: GapKind::ProbeVsLimit,
                            probe: p,
                            index: n,
                            gap,
                            delta: None,
                            eps: Some(eps),
                        }],
                    }),
                    resolution: res,
                });
            }
        }
    }
    Ok(Verdict { tag: VerdictTag::ConsistentUpTo, witness: None, resolution: res })
}
