//! Persistence-of-excitation certificates: for every window start `t`,
//! `lambda_2((1/tau) integral_t^{t+tau} L_xi) >= mu`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{Convention, Laplacian, WeightMatrix};
use crate::schedule::WeightSchedule;
use crate::{Error, Result};

/// Uniform offsets added to the breakpoint-derived window starts of
/// non-periodic schedules.
pub const DEFAULT_GRID: usize = 256;
/// Absolute slack when comparing `lambda_2` against `mu`.
pub const LAMBDA_TOL: f64 = 1e-12;
/// Midpoint dip below the segment endpoints that marks a certificate non-exact.
const CONCAVITY_TOL: f64 = 1e-9;

/// Which window starts to examine.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetSpec {
    /// Exhaustive breakpoint enumeration (plus a uniform grid off the periodic case).
    #[default]
    Auto,
    /// Window starts at multiples of the period, or of the mesh when there is no period.
    Aligned,
    Explicit { offsets: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeCertificate {
    pub tau: f64,
    pub mu: f64,
    pub convention: Convention,
    pub holds: bool,
    pub worst_offset: f64,
    pub worst_lambda2: f64,
    pub t_grid_spec: String,
    pub exact: bool,
    /// Window starts range over `[0, horizon - tau]`.
    pub horizon: f64,
    pub windows_checked: usize,
}

struct Scan {
    worst_offset: f64,
    worst_lambda2: f64,
    exact: bool,
    spec: String,
    count: usize,
}

fn lambda2_at(s: &WeightSchedule, t: f64, tau: f64, conv: Convention) -> Result<f64> {
    Ok(Laplacian::from_weights(&s.window_average(t, tau)?).algebraic_connectivity(conv))
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(1.0));
    v
}

/// Window starts in `[lo, hi]` at which the averaged Laplacian can change
/// slope: cell boundaries `b` and `b - tau`, plus the interval ends.
fn structural_starts(s: &WeightSchedule, lo: f64, hi: f64, tau: f64) -> Result<Vec<f64>> {
    let mut starts = vec![lo, hi];
    for b in s.cell_boundaries(lo, (hi + tau).min(s.horizon().unwrap_or(f64::INFINITY)))? {
        for t in [b, b - tau] {
            if t > lo && t < hi {
                starts.push(t);
            }
        }
    }
    if let Some(p) = s.period() {
        // boundaries of earlier periods shifted by tau land in [lo, hi] too
        for b in s.cell_boundaries(0.0, p + tau)? {
            let t = (b - tau).rem_euclid(p);
            if t > lo && t < hi {
                starts.push(t);
            }
        }
    }
    Ok(sorted_unique(starts))
}

fn scan(s: &WeightSchedule, tau: f64, horizon: f64, conv: Convention, offsets: &OffsetSpec) -> Result<Scan> {
    let period = s.period();
    let (starts, mut exact, spec, segments) = match offsets {
        OffsetSpec::Explicit { offsets } => {
            if offsets.is_empty() {
                return Err(Error::InvalidArgument("no offsets given".into()));
            }
            let desc = format!("{} explicit offsets", offsets.len());
            (offsets.clone(), false, desc, false)
        }
        OffsetSpec::Aligned => {
            let step = period.or(s.mesh());
            let starts = match step {
                None => vec![0.0],
                Some(p) => {
                    let n = ((horizon - tau) / p + 1e-9).floor().max(0.0) as usize;
                    (0..=n.min(100_000)).map(|k| k as f64 * p).collect()
                }
            };
            let desc = format!("{} aligned offsets", starts.len());
            (starts, false, desc, false)
        }
        OffsetSpec::Auto => {
            if s.is_constant() {
                (vec![0.0], true, "single window (constant schedule)".to_string(), false)
            } else if let Some(p) = period {
                let starts = structural_starts(s, 0.0, p, tau)?;
                let desc = format!("{} breakpoint residues over one period of length {p}, with segment midpoints", starts.len());
                (starts, true, desc, true)
            } else {
                let hi = horizon - tau;
                let mut starts = structural_starts(s, 0.0, hi, tau)?;
                let grid = DEFAULT_GRID;
                starts.extend((0..grid).map(|k| hi * k as f64 / (grid - 1) as f64));
                let starts = sorted_unique(starts);
                let desc = format!(
                    "{} window starts on [0, {hi}]: cell boundaries b and b - tau, a uniform grid of {grid}, with segment midpoints",
                    starts.len()
                );
                (starts, false, desc, true)
            }
        }
    };
    let at_starts: Vec<f64> = starts.par_iter().map(|&t| lambda2_at(s, t, tau, conv)).collect::<Result<_>>()?;
    let mut evaluated: Vec<(f64, f64)> = starts.iter().copied().zip(at_starts.iter().copied()).collect();
    if segments {
        let mids: Vec<(f64, f64, f64)> = starts.windows(2).zip(at_starts.windows(2))
            .map(|(t, l)| (0.5 * (t[0] + t[1]), l[0].min(l[1]), 0.0))
            .collect();
        let mid_vals: Vec<f64> = mids.par_iter().map(|&(t, _, _)| lambda2_at(s, t, tau, conv)).collect::<Result<_>>()?;
        for (&(t, ends, _), &v) in mids.iter().zip(&mid_vals) {
            if v < ends - CONCAVITY_TOL {
                exact = false;
            }
            evaluated.push((t, v));
        }
    }
    // deterministic reduction: smallest lambda, then earliest start
    let (worst_offset, worst_lambda2) = evaluated
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("at least one window");
    Ok(Scan { worst_offset, worst_lambda2, exact, spec, count: evaluated.len() })
}

fn validate(s: &WeightSchedule, tau: f64, horizon: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if !(horizon >= tau) {
        return Err(Error::InvalidArgument(format!("horizon {horizon} shorter than tau = {tau}")));
    }
    if let Some(h) = s.horizon() {
        if horizon > h * (1.0 + 1e-12) {
            return Err(Error::BeyondHorizon { t: horizon, horizon: h });
        }
    }
    Ok(())
}

/// Certifies (PE) with constants `(tau, mu)` for window starts in `[0, horizon - tau]`.
pub fn check_pe(
    s: &WeightSchedule,
    tau: f64,
    mu: f64,
    horizon: f64,
    convention: Convention,
    offsets: &OffsetSpec,
) -> Result<PeCertificate> {
    validate(s, tau, horizon)?;
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::InvalidArgument(format!("mu must lie in (0, 1], got {mu}")));
    }
    let sc = scan(s, tau, horizon, convention, offsets)?;
    Ok(PeCertificate {
        tau,
        mu,
        convention,
        holds: sc.worst_lambda2 >= mu - LAMBDA_TOL,
        worst_offset: sc.worst_offset,
        worst_lambda2: sc.worst_lambda2,
        t_grid_spec: sc.spec,
        exact: sc.exact,
        horizon,
        windows_checked: sc.count,
    })
}

/// Best PE constant `mu*(tau)`, clipped to `[0, 1]`, for each window length.
pub fn estimate_pe_params(
    s: &WeightSchedule,
    tau_grid: &[f64],
    horizon: f64,
    convention: Convention,
) -> Result<Vec<(f64, f64)>> {
    if tau_grid.is_empty() {
        return Err(Error::InvalidArgument("empty tau grid".into()));
    }
    tau_grid
        .iter()
        .map(|&tau| {
            validate(s, tau, horizon)?;
            let sc = scan(s, tau, horizon, convention, &OffsetSpec::Auto)?;
            Ok((tau, sc.worst_lambda2.clamp(0.0, 1.0)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAverageReport {
    pub holds: bool,
    pub n_slots: usize,
    pub tau: f64,
    pub mu: f64,
    pub convention: Convention,
    /// Smallest `lambda_2` of an `n`-slot average, and the slot index `m` attaining it.
    pub worst_lambda2: f64,
    pub worst_slot: usize,
    pub averages_checked: usize,
    /// PE constant `mu / 2` implied for windows of length `tau`.
    pub implied_mu: f64,
}

/// Checks that every average `(1/n) sum_{k<n} xi((m+k) tau/n)` over one
/// period (or over the schedule horizon) has `lambda_2 >= mu`.
pub fn check_slot_averages(
    s: &WeightSchedule,
    tau: f64,
    n_slots: usize,
    mu: f64,
    convention: Convention,
    horizon: Option<f64>,
) -> Result<SlotAverageReport> {
    if n_slots == 0 || !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("need n >= 1 and tau > 0, got {n_slots}, {tau}")));
    }
    let cell = tau / n_slots as f64;
    if let Some(m) = s.mesh() {
        let ratio = m / cell;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(Error::InvalidSchedule(format!("mesh {m} is not a multiple of tau/n = {cell}")));
        }
    }
    let count = if s.is_constant() {
        1
    } else if let Some(p) = s.period() {
        (p / cell).round() as usize
    } else {
        let h = horizon.or(s.horizon()).ok_or_else(|| Error::InvalidArgument("horizon required".into()))?;
        (((h - tau) / cell + 1e-9).floor() as usize) + 1
    };
    let lambdas: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|m| {
            let samples: Vec<WeightMatrix> =
                (0..n_slots).map(|k| s.sample(((m + k) as f64 + 0.5) * cell)).collect::<Result<_>>()?;
            let w = 1.0 / n_slots as f64;
            let avg = WeightMatrix::combination(s.n_agents(), samples.iter().map(|x| (w, x)))?;
            Ok(Laplacian::from_weights(&avg).algebraic_connectivity(convention))
        })
        .collect::<Result<_>>()?;
    let (worst_slot, worst_lambda2) = lambdas
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("at least one average");
    Ok(SlotAverageReport {
        holds: worst_lambda2 > 0.0 && worst_lambda2 >= mu - LAMBDA_TOL,
        n_slots,
        tau,
        mu,
        convention,
        worst_lambda2,
        worst_slot,
        averages_checked: count,
        implied_mu: mu / 2.0,
    })
}
