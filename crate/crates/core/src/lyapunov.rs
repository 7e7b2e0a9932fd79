//! Strict Lyapunov functionals along recorded trajectories.
//!
//! With `G(t) = integral_0^t L(s, x(s)) ds` and `H(t) = integral_0^t G`,
//!
//! ```text
//! psi_tau(t) = (1 + c^2) tau I - (1/tau) integral_t^{t+tau} integral_t^s L
//!            = (1 + c^2) tau I - (H(t+tau) - H(t)) / tau + G(t)
//! X_tau(t)   = lambda X(t) + sqrt(B(psi_tau(t) x, x))
//! V_tau(t)   = lambda(t) V(t) + sqrt(B(psi_tau(t) v, v))
//! ```
//!
//! `L` is linear in time between recorded states (trapezoid rule), which
//! makes `G` and `H` piecewise quadratic and cubic.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Order, Trajectory};
use crate::graph::{Laplacian, WeightMatrix};
use crate::kernel::{KernelFloor, Kernel, RescaledKernel};
use crate::schedule::WeightSchedule;
use crate::state::{centered, variance_form_unchecked, CONVERGED_DEVIATION};
use crate::{AgentMatrix, Error, Result};

/// Radius inflation used by the conservative constants.
pub const SAFETY_MARGIN: f64 = 1.1;
/// Dissipation checks stop at this fraction of the blow-up time `2 T_eps0`.
pub const BLOWUP_FRACTION: f64 = 0.99;
/// Relative slack on dissipation residuals.
pub const RESIDUAL_REL_TOL: f64 = 1e-6;
/// Coefficient of the `h^2` discretization slack on dissipation residuals.
pub const DISCRETIZATION_COEFF: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConstants {
    /// Largest agent distance to the origin along the trajectory.
    #[serde(rename = "R")]
    pub r: f64,
    /// `max phi` on `[0, 2R]`.
    #[serde(rename = "C_R")]
    pub c_r: f64,
    /// `min phi` over realized pair distances.
    #[serde(rename = "C0")]
    pub c0: f64,
    /// `sup ||L(t, x)||_B^{1/2}`.
    pub c: f64,
    pub tau: f64,
    pub mu: f64,
    /// Decay rate of `X_tau`.
    pub alpha: f64,
    pub eps_const: f64,
    pub lambda_const: f64,
    pub conservative: bool,
}

fn closed_forms(c0: f64, c: f64, tau: f64, mu: f64) -> (f64, f64, f64) {
    let s = ((1.0 + c * c) * tau).sqrt();
    let eps = c0 * mu / (2.0 * c.powi(3) * tau * (1.0 + c * c).sqrt());
    // 1/(2 sqrt tau) + c^3 sqrt(tau) / (2 eps), without dividing by eps
    let lambda = 1.0 / (2.0 * tau.sqrt()) + c.powi(6) * tau.powf(1.5) * (1.0 + c * c).sqrt() / (c0 * mu);
    let alpha = c0 * mu / (4.0 * s * (lambda + s));
    (eps, lambda, alpha)
}

impl LyapunovConstants {
    /// Completes the constants from `C0`, `c`, `tau` and `mu`.
    pub fn from_parts(r: f64, c_r: f64, c0: f64, c: f64, tau: f64, mu: f64, conservative: bool) -> Result<Self> {
        if !(tau > 0.0) || !(mu > 0.0) || !(c0 > 0.0) || !(c >= 0.0) {
            return Err(Error::InvalidArgument(format!("need tau, mu, C0 > 0 and c >= 0; got {tau}, {mu}, {c0}, {c}")));
        }
        let (eps_const, lambda_const, alpha) = closed_forms(c0, c, tau, mu);
        Ok(Self { r, c_r, c0, c, tau, mu, alpha, eps_const, lambda_const, conservative })
    }
}

/// Weights of every recorded interval, checking that none straddles a breakpoint.
fn interval_weights(traj: &Trajectory, schedule: &WeightSchedule) -> Result<Vec<WeightMatrix>> {
    traj.times
        .windows(2)
        .map(|w| {
            if !schedule.breakpoints(w[0], w[1])?.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "recorded interval [{}, {}] contains a schedule breakpoint; record every step",
                    w[0], w[1]
                )));
            }
            schedule.sample(0.5 * (w[0] + w[1]))
        })
        .collect()
}

fn pair_distance_extrema(x: &AgentMatrix) -> (f64, f64) {
    let n = x.nrows();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = (x.row(i) - x.row(j)).norm();
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    (lo, hi)
}

/// Constants measured on the realized trajectory.
pub fn compute_constants(traj: &Trajectory, kernel: &Kernel, schedule: &WeightSchedule, tau: f64, mu: f64) -> Result<LyapunovConstants> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let weights = interval_weights(traj, schedule)?;
    let r = traj
        .states
        .iter()
        .flat_map(|s| s.positions.row_iter().map(|row| row.norm()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let max_dist = traj.states.iter().map(|s| pair_distance_extrema(&s.positions).1).fold(0.0, f64::max);
    let c0 = kernel.eval_unchecked(max_dist);
    let c_r = kernel.max_value();
    let c2 = (0..weights.len())
        .into_par_iter()
        .map(|k| {
            let a = Laplacian::state_dependent(&weights[k], &traj.states[k].positions, kernel)?.b_operator_norm();
            let b = Laplacian::state_dependent(&weights[k], &traj.states[k + 1].positions, kernel)?.b_operator_norm();
            Ok(a.max(b))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    LyapunovConstants::from_parts(r, c_r, c0, c2.sqrt(), tau, mu, false)
}

/// A-priori constants: `C0 = phi(2 * 1.1 R)` and `c^2 = phi(0) * max ||L_xi||_B`
/// over the schedule cells in `[0, horizon]` (one period for periodic schedules).
pub fn compute_constants_conservative(
    traj: &Trajectory,
    kernel: &Kernel,
    schedule: &WeightSchedule,
    tau: f64,
    mu: f64,
    horizon: f64,
) -> Result<LyapunovConstants> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let r = traj
        .states
        .iter()
        .flat_map(|s| s.positions.row_iter().map(|row| row.norm()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
        * SAFETY_MARGIN;
    let span = schedule.period().unwrap_or(horizon);
    let sup_xi = schedule
        .pieces(0.0, span)?
        .iter()
        .map(|p| Laplacian::from_weights(&p.weights).b_operator_norm())
        .fold(0.0, f64::max);
    let c_r = kernel.max_value();
    let c0 = kernel.eval_unchecked(2.0 * r);
    LyapunovConstants::from_parts(r, c_r, c0, (c_r * sup_xi).sqrt(), tau, mu, true)
}

/// Cumulative integrals `G`, `H` of the state Laplacian along a trajectory.
pub struct LyapunovContext<'a> {
    traj: &'a Trajectory,
    tau: f64,
    l_left: Vec<DMatrix<f64>>,
    l_right: Vec<DMatrix<f64>>,
    g: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
}

impl<'a> LyapunovContext<'a> {
    pub fn new(traj: &'a Trajectory, schedule: &WeightSchedule, kernel: &Kernel, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        if traj.len() < 2 {
            return Err(Error::InvalidArgument("trajectory needs at least two states".into()));
        }
        let weights = interval_weights(traj, schedule)?;
        let (l_left, l_right): (Vec<_>, Vec<_>) = (0..weights.len())
            .into_par_iter()
            .map(|k| {
                let l = Laplacian::state_dependent(&weights[k], &traj.states[k].positions, kernel)?.matrix().clone();
                let r = Laplacian::state_dependent(&weights[k], &traj.states[k + 1].positions, kernel)?.matrix().clone();
                Ok((l, r))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let n = traj.states[0].n_agents();
        let mut g = Vec::with_capacity(traj.len());
        let mut h = Vec::with_capacity(traj.len());
        g.push(DMatrix::zeros(n, n));
        h.push(DMatrix::zeros(n, n));
        for k in 0..l_left.len() {
            let dt = traj.times[k + 1] - traj.times[k];
            let (ll, lr) = (&l_left[k], &l_right[k]);
            let gk = &g[k];
            let hn = &h[k] + gk * dt + (ll / 3.0 + lr / 6.0) * (dt * dt);
            let gn = gk + (ll + lr) * (0.5 * dt);
            g.push(gn);
            h.push(hn);
        }
        Ok(Self { traj, tau, l_left, l_right, g, h })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn trajectory(&self) -> &Trajectory {
        self.traj
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let times = &self.traj.times;
        let end = self.traj.t_end();
        let tol = 1e-9 * end.max(1.0);
        if t < times[0] - tol || t > end + tol {
            return Err(Error::InsufficientHorizon { from: t, to: t, end });
        }
        let t = t.clamp(times[0], end);
        let k = times.partition_point(|&s| s <= t).saturating_sub(1).min(times.len() - 2);
        Ok((k, t - times[k]))
    }

    /// `G(t)`.
    pub fn g_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (k, s) = self.locate(t)?;
        let dt = self.traj.times[k + 1] - self.traj.times[k];
        let d = &self.l_right[k] - &self.l_left[k];
        Ok(&self.g[k] + &self.l_left[k] * s + d * (s * s / (2.0 * dt)))
    }

    /// `H(t)`.
    pub fn h_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (k, s) = self.locate(t)?;
        let dt = self.traj.times[k + 1] - self.traj.times[k];
        let d = &self.l_right[k] - &self.l_left[k];
        Ok(&self.h[k] + &self.g[k] * s + &self.l_left[k] * (s * s / 2.0) + d * (s.powi(3) / (6.0 * dt)))
    }

    /// Piecewise-linear `L(t, x(t))`; right limit at recorded times.
    pub fn laplacian_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (k, s) = self.locate(t)?;
        let dt = self.traj.times[k + 1] - self.traj.times[k];
        Ok(&self.l_left[k] + (&self.l_right[k] - &self.l_left[k]) * (s / dt))
    }

    fn check_window(&self, t: f64) -> Result<()> {
        let end = self.traj.t_end();
        if t + self.tau > end * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::InsufficientHorizon { from: t, to: t + self.tau, end });
        }
        Ok(())
    }

    /// `(1/tau) integral_t^{t+tau} L(s, x(s)) ds`.
    pub fn window_average(&self, t: f64) -> Result<DMatrix<f64>> {
        self.check_window(t)?;
        Ok((self.g_at(t + self.tau)? - self.g_at(t)?) / self.tau)
    }

    /// `psi_tau(t)` as an `N x N` matrix acting on each coordinate.
    pub fn psi_tau(&self, t: f64, c: f64) -> Result<DMatrix<f64>> {
        self.check_window(t)?;
        let n = self.g[0].nrows();
        let id = DMatrix::<f64>::identity(n, n) * ((1.0 + c * c) * self.tau);
        Ok(id - (self.h_at(t + self.tau)? - self.h_at(t)?) / self.tau + self.g_at(t)?)
    }

    fn node(&self, t: f64) -> Result<usize> {
        self.traj
            .index_of(t)
            .ok_or_else(|| Error::InvalidArgument(format!("t = {t} is not a recorded time")))
    }
}

/// `sqrt(B(psi y, y))`.
fn psi_norm(psi: &DMatrix<f64>, y: &AgentMatrix) -> f64 {
    let yc = centered(y);
    variance_form_unchecked(&(psi * &yc), &yc).max(0.0).sqrt()
}

/// `X_tau(t)` at a recorded time.
pub fn x_cal(ctx: &LyapunovContext, t: f64, consts: &LyapunovConstants) -> Result<f64> {
    let k = ctx.node(t)?;
    let psi = ctx.psi_tau(t, consts.c)?;
    let s = &ctx.traj.states[k];
    Ok(consts.lambda_const * ctx.traj.stats[k].x + psi_norm(&psi, &s.positions))
}

/// Parameters of the velocity functional for a given `eps0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlockingTuning {
    pub eps0: f64,
    pub t_eps0: f64,
    pub c: f64,
    pub tau: f64,
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
    pub alpha3: f64,
    pub beta3: f64,
    pub alpha2p: f64,
    pub beta2p: f64,
}

impl FlockingTuning {
    pub fn new(eps0: f64, c: f64, tau: f64) -> Result<Self> {
        if !(eps0 > 0.0 && eps0.is_finite()) || !(c >= 0.0) || !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("need eps0 > 0, c >= 0, tau > 0; got {eps0}, {c}, {tau}")));
        }
        let st = tau.sqrt();
        let s = ((1.0 + c * c) * tau).sqrt();
        let alpha1 = c.powi(3) * st / 2.0;
        let beta1 = s + 1.0 / (2.0 * st);
        let alpha2 = c.powi(3) * (2.0 * tau).sqrt() / 4.0;
        let beta2 = st + 1.0 / (2.0 * st);
        Ok(Self {
            eps0,
            t_eps0: 1.0 / (4.0 * eps0 * eps0),
            c,
            tau,
            alpha1,
            beta1,
            alpha2,
            beta2,
            alpha3: 2.0 * s * alpha1,
            beta3: 2.0 * s * beta1,
            alpha2p: 2.0 * s * alpha2,
            beta2p: 2.0 * s * beta2,
        })
    }

    /// `eps0` whose horizon `1 / (4 eps0^2)` equals `t`.
    pub fn eps0_for_horizon(t: f64) -> f64 {
        1.0 / (2.0 * t.sqrt())
    }

    /// Blow-up time `1 / (2 eps0^2)` of `eps(t)`.
    pub fn blowup_time(&self) -> f64 {
        2.0 * self.t_eps0
    }

    /// `eps(t) = eps0 / sqrt(1 - 2 eps0^2 t)`.
    pub fn epsilon_at(&self, t: f64) -> Result<f64> {
        let d = 1.0 - 2.0 * self.eps0 * self.eps0 * t;
        if !(t >= 0.0) || !(d > 0.0) {
            return Err(Error::InvalidArgument(format!("eps(t) undefined at t = {t} (blow-up at {})", self.blowup_time())));
        }
        Ok(self.eps0 / d.sqrt())
    }

    /// `lambda(t) = 1/(2 sqrt tau) + c^3 sqrt(tau) / (2 eps(t))`.
    pub fn lambda_at(&self, t: f64) -> Result<f64> {
        Ok(1.0 / (2.0 * self.tau.sqrt()) + self.c.powi(3) * self.tau.sqrt() / (2.0 * self.epsilon_at(t)?))
    }

    /// `(alpha2/eps0 + beta2, alpha1/eps0 + beta1)`: the framing of `V_tau / V` on `[0, T_eps0]`.
    pub fn framing(&self) -> (f64, f64) {
        (self.alpha2 / self.eps0 + self.beta2, self.alpha1 / self.eps0 + self.beta1)
    }
}

/// `V_tau(t)` at a recorded time.
pub fn v_cal(ctx: &LyapunovContext, t: f64, tuning: &FlockingTuning) -> Result<f64> {
    let k = ctx.node(t)?;
    let v = ctx.traj.states[k]
        .velocities
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("velocity functional needs a second-order trajectory".into()))?;
    let psi = ctx.psi_tau(t, tuning.c)?;
    Ok(tuning.lambda_at(t)? * ctx.traj.stats[k].v + psi_norm(&psi, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub samples: usize,
    /// Largest `D + rate * value` over samples, `D` a central difference.
    pub max_residual: f64,
    pub worst_time: Option<f64>,
    pub slack: f64,
    pub within_slack: bool,
    pub window: (f64, f64),
    pub initial_value: f64,
    pub max_step: f64,
    /// Samples skipped because the relevant deviation was below the consensus floor.
    pub converged: usize,
}

/// Interior recorded indices with both neighbours inside `[lo, hi]`.
fn interior_nodes(traj: &Trajectory, lo: f64, hi: f64, stride: usize) -> Vec<usize> {
    (1..traj.len().saturating_sub(1))
        .filter(|&k| traj.times[k - 1] >= lo - 1e-12 && traj.times[k + 1] <= hi + 1e-12)
        .step_by(stride.max(1))
        .collect()
}

fn max_step(traj: &Trajectory) -> f64 {
    traj.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn reduce(samples: Vec<Option<(f64, f64)>>) -> (usize, f64, Option<f64>, usize) {
    let converged = samples.iter().filter(|s| s.is_none()).count();
    let worst = samples.iter().flatten().copied().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)));
    (samples.len(), worst.map_or(f64::NEG_INFINITY, |w| w.1), worst.map(|w| w.0), converged)
}

/// Central-difference check of `X_tau' <= -alpha X_tau` at every `stride`-th
/// recorded time with a full window ahead.
pub fn check_consensus_dissipation(ctx: &LyapunovContext, consts: &LyapunovConstants, stride: usize) -> Result<DissipationReport> {
    let traj = ctx.traj;
    if traj.order != Order::First {
        return Err(Error::InvalidArgument("consensus dissipation needs a first-order trajectory".into()));
    }
    let hi = traj.t_end() - ctx.tau;
    if hi <= traj.times[0] {
        return Err(Error::InsufficientHorizon { from: 0.0, to: ctx.tau, end: traj.t_end() });
    }
    let x0 = x_cal(ctx, traj.times[0], consts)?;
    let nodes = interior_nodes(traj, traj.times[0], hi, stride);
    let samples: Vec<Option<(f64, f64)>> = nodes
        .par_iter()
        .map(|&k| {
            if traj.stats[k].x < CONVERGED_DEVIATION {
                return Ok(None);
            }
            let (tm, t, tp) = (traj.times[k - 1], traj.times[k], traj.times[k + 1]);
            let d = (x_cal(ctx, tp, consts)? - x_cal(ctx, tm, consts)?) / (tp - tm);
            Ok(Some((t, d + consts.alpha * x_cal(ctx, t, consts)?)))
        })
        .collect::<Result<_>>()?;
    let h = max_step(traj);
    let slack = RESIDUAL_REL_TOL * x0 + DISCRETIZATION_COEFF * h * h * x0;
    let (n, max_residual, worst_time, converged) = reduce(samples);
    Ok(DissipationReport {
        samples: n,
        max_residual,
        worst_time,
        slack,
        within_slack: max_residual <= slack,
        window: (traj.times[0], hi),
        initial_value: x0,
        max_step: h,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowInequalityReport {
    pub vectors: usize,
    /// Smallest `B(A w, w) - mu phi_tau(X(t)) B(w, w)` over unit `B(w, w)`.
    pub min_margin: f64,
    pub worst_time: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlockingDissipationReport {
    pub dissipation: DissipationReport,
    pub window_inequality: WindowInequalityReport,
    /// Whether the window was cut at `0.99 * 2 T_eps0`.
    pub truncated_at_blowup: bool,
}

/// Tolerance on the direct window-averaged inequality.
pub const WINDOW_INEQUALITY_TOL: f64 = 1e-8;

/// Central-difference check of
/// `V_tau' <= -(mu phi_tau(X) / (2 sqrt((1+c^2) tau))) V` on `[0, 0.99 * 2 T_eps0)`,
/// plus a direct check of the window-averaged inequality behind it on
/// `n_vectors` random mean-zero directions.
pub fn check_flocking_dissipation(
    ctx: &LyapunovContext,
    tuning: &FlockingTuning,
    mu: f64,
    rk: &RescaledKernel,
    stride: usize,
    n_vectors: usize,
    seed: u64,
) -> Result<FlockingDissipationReport> {
    let traj = ctx.traj;
    if traj.order != Order::Second {
        return Err(Error::InvalidArgument("flocking dissipation needs a second-order trajectory".into()));
    }
    let t0 = traj.times[0];
    let blow = BLOWUP_FRACTION * tuning.blowup_time();
    let data_end = traj.t_end() - ctx.tau;
    let hi = blow.min(data_end);
    if hi <= t0 {
        return Err(Error::InsufficientHorizon { from: t0, to: t0 + ctx.tau, end: traj.t_end() });
    }
    let s = ((1.0 + tuning.c * tuning.c) * tuning.tau).sqrt();
    let v0 = v_cal(ctx, t0, tuning)?;
    let nodes = interior_nodes(traj, t0, hi, stride);
    let samples: Vec<Option<(f64, f64)>> = nodes
        .par_iter()
        .map(|&k| {
            if traj.stats[k].v < CONVERGED_DEVIATION {
                return Ok(None);
            }
            let (tm, t, tp) = (traj.times[k - 1], traj.times[k], traj.times[k + 1]);
            let d = (v_cal(ctx, tp, tuning)? - v_cal(ctx, tm, tuning)?) / (tp - tm);
            let rate = mu * rk.eval(traj.stats[k].x)? / (2.0 * s);
            Ok(Some((t, d + rate * traj.stats[k].v)))
        })
        .collect::<Result<_>>()?;
    let h = max_step(traj);
    let slack = RESIDUAL_REL_TOL * v0 + DISCRETIZATION_COEFF * h * h * v0;
    let (n, max_residual, worst_time, converged) = reduce(samples);
    let dissipation = DissipationReport {
        samples: n,
        max_residual,
        worst_time,
        slack,
        within_slack: max_residual <= slack,
        window: (t0, hi),
        initial_value: v0,
        max_step: h,
        converged,
    };
    let window_inequality = check_window_inequality(ctx, mu, rk, n_vectors, seed)?;
    Ok(FlockingDissipationReport { dissipation, window_inequality, truncated_at_blowup: blow < data_end })
}

/// Direct check of `B(A(t) w, w) >= mu phi_tau(X(t)) B(w, w)`, `A(t)` the
/// window average of the state Laplacian, on `n_vectors` random unit
/// directions spread over up to 100 window starts.
pub fn check_window_inequality(ctx: &LyapunovContext, mu: f64, rk: &RescaledKernel, n_vectors: usize, seed: u64) -> Result<WindowInequalityReport> {
    let traj = ctx.traj;
    let hi = traj.t_end() - ctx.tau;
    let starts: Vec<usize> = (0..traj.len()).filter(|&k| traj.times[k] <= hi + 1e-12).collect();
    if starts.is_empty() || n_vectors == 0 {
        return Err(Error::InsufficientHorizon { from: traj.times[0], to: traj.times[0] + ctx.tau, end: traj.t_end() });
    }
    let n_times = starts.len().min(100).min(n_vectors);
    let per = n_vectors.div_ceil(n_times);
    let n = traj.states[0].n_agents();
    let d = traj.states[0].dim();
    let results: Vec<(f64, f64)> = (0..n_times)
        .into_par_iter()
        .map(|j| {
            let k = starts[j * (starts.len() - 1) / (n_times - 1).max(1)];
            let t = traj.times[k];
            let a = ctx.window_average(t)?;
            let bound = mu * rk.eval(traj.stats[k].x)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut worst = f64::INFINITY;
            for _ in 0..per {
                let w = centered(&AgentMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)));
                let bw = variance_form_unchecked(&w, &w);
                if bw == 0.0 {
                    continue;
                }
                let margin = (variance_form_unchecked(&(&a * &w), &w) - bound * bw) / bw;
                worst = worst.min(margin);
            }
            Ok((t, worst))
        })
        .collect::<Result<_>>()?;
    let (worst_time, min_margin) = results
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("at least one window");
    Ok(WindowInequalityReport { vectors: per * n_times, min_margin, worst_time, holds: min_margin >= -WINDOW_INEQUALITY_TOL })
}

/// Velocity bound at `T_eps0` and the constants behind its asymptotic form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlockingBound {
    pub eps0: f64,
    pub t_eps0: f64,
    pub x_m: f64,
    pub phi_tau_at_x_m: f64,
    pub v_bound_at_t: f64,
    /// `Phi_tau(X_M) = A1 + A2 / eps0`.
    pub a1: f64,
    pub a2: f64,
    /// `Phi(Y) = A3 Phi_tau(X) + A4` with `Y = 2 sqrt(N) (X + tau V(0))`, `Phi` anchored at `X(0)`.
    pub a3: f64,
    pub a4: f64,
    /// `phi_tau(X_M) >= K (C1 + C2 / eps0)^(beta / (beta - 1))`.
    pub c1: f64,
    pub c2: f64,
    pub phi_tau_lower: f64,
    /// `V(T) <= C3 exp(-C4 mu T^exponent)` for `T >= 1/4`.
    pub c3: f64,
    pub c4: f64,
    pub exponent: f64,
    pub asymptotic_bound: f64,
}

/// Evaluates the velocity bound at `T_eps0` for a kernel satisfying the
/// strong-interaction bound with constants `hyp`.
pub fn flocking_bound(tuning: &FlockingTuning, mu: f64, rk: &RescaledKernel, hyp: KernelFloor) -> Result<FlockingBound> {
    if !hyp.beta_admissible() {
        return Err(Error::InvalidKernel(format!("exponent beta = {} outside (0, 1/2)", hyp.beta)));
    }
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::InvalidArgument(format!("mu must lie in (0, 1], got {mu}")));
    }
    if (tuning.tau - rk.tau()).abs() > 1e-12 * tuning.tau {
        return Err(Error::InvalidArgument("tuning and rescaled kernel use different tau".into()));
    }
    let FlockingTuning { eps0, t_eps0, c, tau, alpha1, beta1, alpha2, beta2, alpha3, beta3, .. } = *tuning;
    let v0 = rk.v0();
    let x0 = rk.x0();
    let s = ((1.0 + c * c) * tau).sqrt();
    let x_m = rk.critical_radius(eps0, c, mu, alpha1, beta1)?;
    let phi_m = rk.eval(x_m)?;
    let prefactor = (alpha1 + beta1 * eps0) / (alpha2 + beta2 * eps0);
    let v_bound_at_t = prefactor * v0 * (-mu * phi_m / (4.0 * (alpha3 + beta3 * eps0) * eps0)).exp();

    let KernelFloor { k, sigma, beta } = hyp;
    let e = 1.0 - beta;
    let a1 = 2.0 * s * beta1 * v0 / mu;
    let a2 = 2.0 * s * alpha1 * v0 / mu;
    let a3 = rk.scale();
    let a4 = rk.base().integral(x0, rk.base_radius(x0));
    let c1 = e / k * (a3 * a1 + a4) + (sigma + x0).powf(e);
    let c2 = e / k * a3 * a2;
    let phi_tau_lower = k * (c1 + c2 / eps0).powf(-beta / e);
    let c3 = (alpha1 / alpha2).max(beta1 / beta2) * v0;
    let exponent = (1.0 - 2.0 * beta) / (2.0 * e);
    let c4 = k * (c1 + c2).powf(-beta / e) * 2f64.powf((1.0 - 2.0 * beta) / e) / (4.0 * (alpha3 + beta3));
    let asymptotic_bound = c3 * (-c4 * mu * t_eps0.powf(exponent)).exp();
    Ok(FlockingBound {
        eps0,
        t_eps0,
        x_m,
        phi_tau_at_x_m: phi_m,
        v_bound_at_t,
        a1,
        a2,
        a3,
        a4,
        c1,
        c2,
        phi_tau_lower,
        c3,
        c4,
        exponent,
        asymptotic_bound,
    })
}
