//! Integration of the first-order system `x' = -L(t, x) x` and the
//! second-order system `x' = v, v' = -L(t, x) v`, with per-step monitors.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::graph::{Laplacian, WeightMatrix};
use crate::kernel::Kernel;
use crate::schedule::WeightSchedule;
use crate::state::{std_devs, EnsembleState, VarianceStats};
use crate::{AgentMatrix, Error, Result};

pub const DEFAULT_CONSENSUS_TOL: f64 = 1e-6;
pub const DEFAULT_FLOCKING_TOL: f64 = 1e-4;
/// Steps per mesh cell when no step is given.
pub const DEFAULT_STEPS_PER_CELL: usize = 20;
/// Step used for constant schedules when no step is given.
pub const DEFAULT_CONSTANT_STEP: f64 = 1e-3;
/// First line of trajectory CSV files.
pub const CSV_HEADER_COMMENT: &str = "# flockyap-trajectory v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

/// Residuals between consecutive recorded states; positive values of the
/// `*_residual` fields are violations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMonitor {
    /// First order: `|mean x(t) - mean x(0)|`. Second order: `|mean x(t) - mean x(0) - t mean v(0)|`.
    pub mean_drift: f64,
    /// Second order: `|mean v(t) - mean v(0)|`.
    pub velocity_drift: f64,
    /// `V(t_k) - V(t_{k-1})`.
    pub v_monotone_residual: f64,
    /// `X(t_k) - X(t_{k-1})`.
    pub x_monotone_residual: f64,
    /// `(X(t_k) - X(t_{k-1})) / h - max(V(t_{k-1}), V(t_k))`.
    pub x_rate_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub order: Order,
    pub times: Vec<f64>,
    pub states: Vec<EnsembleState>,
    pub stats: Vec<VarianceStats>,
    /// `monitors[k]` compares state `k` with state `k - 1`; `monitors[0]` is all zeros.
    pub monitors: Vec<StepMonitor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    /// Upper bound on the step; `None` picks mesh / 20.
    pub step: Option<f64>,
    /// Keep every `record_every`-th step (cell ends are always kept when it is 1).
    pub record_every: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self { step: None, record_every: 1 }
    }
}

/// Default step for a schedule.
pub fn default_step(schedule: &WeightSchedule) -> f64 {
    schedule.mesh().map_or(DEFAULT_CONSTANT_STEP, |m| m / DEFAULT_STEPS_PER_CELL as f64)
}

fn check_shapes(state: &EnsembleState, schedule: &WeightSchedule) -> Result<()> {
    if state.n_agents() != schedule.n_agents() {
        return Err(Error::Dimension(format!(
            "state has {} agents, schedule {}",
            state.n_agents(),
            schedule.n_agents()
        )));
    }
    Ok(())
}

fn field(w: &WeightMatrix, x: &AgentMatrix, y: &AgentMatrix, kernel: &Kernel) -> AgentMatrix {
    let l = Laplacian::state_dependent(w, x, kernel).expect("shapes checked by caller");
    -(l.matrix() * y)
}

/// `-L(t, x) x`.
pub fn rhs_first_order(t: f64, state: &EnsembleState, schedule: &WeightSchedule, kernel: &Kernel) -> Result<AgentMatrix> {
    check_shapes(state, schedule)?;
    let w = schedule.sample(t)?;
    Ok(field(&w, &state.positions, &state.positions, kernel))
}

/// `(v, -L(t, x) v)`.
pub fn rhs_second_order(
    t: f64,
    state: &EnsembleState,
    schedule: &WeightSchedule,
    kernel: &Kernel,
) -> Result<(AgentMatrix, AgentMatrix)> {
    check_shapes(state, schedule)?;
    let v = state
        .velocities
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("second-order right-hand side needs velocities".into()))?;
    let w = schedule.sample(t)?;
    Ok((v.clone(), field(&w, &state.positions, v, kernel)))
}

fn rk4_first(w: &WeightMatrix, k: &Kernel, x: &AgentMatrix, h: f64) -> AgentMatrix {
    let k1 = field(w, x, x, k);
    let x2 = x + &k1 * (h / 2.0);
    let k2 = field(w, &x2, &x2, k);
    let x3 = x + &k2 * (h / 2.0);
    let k3 = field(w, &x3, &x3, k);
    let x4 = x + &k3 * h;
    let k4 = field(w, &x4, &x4, k);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn rk4_second(w: &WeightMatrix, k: &Kernel, x: &AgentMatrix, v: &AgentMatrix, h: f64) -> (AgentMatrix, AgentMatrix) {
    let a1 = field(w, x, v, k);
    let (x2, v2) = (x + v * (h / 2.0), v + &a1 * (h / 2.0));
    let a2 = field(w, &x2, &v2, k);
    let (x3, v3) = (x + &v2 * (h / 2.0), v + &a2 * (h / 2.0));
    let a3 = field(w, &x3, &v3, k);
    let (x4, v4) = (x + &v3 * h, v + &a3 * h);
    let a4 = field(w, &x4, &v4, k);
    let xn = x + (v + &v2 * 2.0 + &v3 * 2.0 + &v4) * (h / 6.0);
    let vn = v + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
    (xn, vn)
}

/// Classical RK4 on `[initial.time, t_end]`, with every schedule cell
/// boundary a step boundary.
pub fn integrate(
    initial: &EnsembleState,
    schedule: &WeightSchedule,
    kernel: &Kernel,
    t_end: f64,
    opts: IntegrateOptions,
) -> Result<Trajectory> {
    check_shapes(initial, schedule)?;
    let t0 = initial.time;
    if !(t_end > t0) || !t_end.is_finite() {
        return Err(Error::InvalidArgument(format!("t_end = {t_end} must exceed the start time {t0}")));
    }
    let step = opts.step.unwrap_or_else(|| default_step(schedule));
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if opts.record_every == 0 {
        return Err(Error::InvalidArgument("record_every must be at least 1".into()));
    }
    let order = if initial.is_second_order() { Order::Second } else { Order::First };
    let mut rec = Recorder::new(initial.clone(), order);
    let mut x = initial.positions.clone();
    let mut v = initial.velocities.clone();
    let mut count = 0usize;
    for piece in schedule.pieces(t0, t_end)? {
        let len = piece.end - piece.start;
        let n_sub = ((len / step) - 1e-9).ceil().max(1.0) as usize;
        let h = len / n_sub as f64;
        for j in 1..=n_sub {
            match v.as_mut() {
                None => x = rk4_first(&piece.weights, kernel, &x, h),
                Some(vel) => {
                    let (xn, vn) = rk4_second(&piece.weights, kernel, &x, vel, h);
                    x = xn;
                    *vel = vn;
                }
            }
            let t = if j == n_sub { piece.end } else { piece.start + j as f64 * h };
            if x.iter().chain(v.iter().flat_map(|m| m.iter())).any(|c| !c.is_finite()) {
                return Err(Error::NonFinite { t, detail: format!("state left the finite range after a step of {h}") });
            }
            count += 1;
            if count.is_multiple_of(opts.record_every) || t == t_end {
                rec.push(EnsembleState { time: t, positions: x.clone(), velocities: v.clone() });
            }
        }
    }
    Ok(rec.finish())
}

struct Recorder {
    traj: Trajectory,
    mean_x0: nalgebra::RowDVector<f64>,
    mean_v0: Option<nalgebra::RowDVector<f64>>,
}

impl Recorder {
    fn new(initial: EnsembleState, order: Order) -> Self {
        let stats = std_devs(&initial);
        let mean_x0 = initial.positions.row_mean();
        let mean_v0 = initial.velocities.as_ref().map(|v| v.row_mean());
        Self {
            traj: Trajectory {
                order,
                times: vec![initial.time],
                states: vec![initial],
                stats: vec![stats],
                monitors: vec![StepMonitor::default()],
            },
            mean_x0,
            mean_v0,
        }
    }

    fn push(&mut self, s: EnsembleState) {
        let st = std_devs(&s);
        let prev = *self.traj.stats.last().unwrap();
        let t_prev = *self.traj.times.last().unwrap();
        let t0 = self.traj.times[0];
        let h = s.time - t_prev;
        let mx = s.positions.row_mean();
        let (mean_drift, velocity_drift) = match &self.mean_v0 {
            None => ((&mx - &self.mean_x0).norm(), 0.0),
            Some(mv0) => {
                let mv = s.velocities.as_ref().unwrap().row_mean();
                ((&mx - &self.mean_x0 - mv0 * (s.time - t0)).norm(), (&mv - mv0).norm())
            }
        };
        self.traj.monitors.push(StepMonitor {
            mean_drift,
            velocity_drift,
            v_monotone_residual: st.v - prev.v,
            x_monotone_residual: st.x - prev.x,
            x_rate_residual: (st.x - prev.x) / h - prev.v.max(st.v),
        });
        self.traj.times.push(s.time);
        self.traj.stats.push(st);
        self.traj.states.push(s);
    }

    fn finish(self) -> Trajectory {
        self.traj
    }
}

impl Trajectory {
    /// Rebuilds monitors and statistics from a list of states.
    pub fn from_states(states: Vec<EnsembleState>) -> Result<Self> {
        let mut it = states.into_iter();
        let first = it.next().ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
        let order = if first.is_second_order() { Order::Second } else { Order::First };
        let mut rec = Recorder::new(first, order);
        for s in it {
            if !(s.time > *rec.traj.times.last().unwrap()) {
                return Err(Error::InvalidArgument(format!("times must increase strictly, got {}", s.time)));
            }
            if s.positions.shape() != rec.traj.states[0].positions.shape() || s.is_second_order() != (order == Order::Second) {
                return Err(Error::Dimension("states disagree on shape or order".into()));
            }
            rec.push(s);
        }
        Ok(rec.finish())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("trajectories are never empty")
    }

    /// Index of the recorded time equal to `t` up to `1e-9` relative.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|&s| s < t);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&k| k < self.times.len())
            .find(|&k| (self.times[k] - t).abs() <= 1e-9 * t.abs().max(1.0))
    }

    /// Index of the last recorded time not after `t`.
    pub fn index_at_or_before(&self, t: f64) -> Option<usize> {
        self.index_of(t).or_else(|| self.times.partition_point(|&s| s <= t).checked_sub(1))
    }

    pub fn x_series(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.x).collect()
    }

    pub fn v_series(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.v).collect()
    }

    /// Largest of each monitor over all recorded steps.
    pub fn monitor_maxima(&self) -> StepMonitor {
        let mut m = StepMonitor {
            mean_drift: 0.0,
            velocity_drift: 0.0,
            v_monotone_residual: f64::NEG_INFINITY,
            x_monotone_residual: f64::NEG_INFINITY,
            x_rate_residual: f64::NEG_INFINITY,
        };
        for s in &self.monitors[1..] {
            m.mean_drift = m.mean_drift.max(s.mean_drift);
            m.velocity_drift = m.velocity_drift.max(s.velocity_drift);
            m.v_monotone_residual = m.v_monotone_residual.max(s.v_monotone_residual);
            m.x_monotone_residual = m.x_monotone_residual.max(s.x_monotone_residual);
            m.x_rate_residual = m.x_rate_residual.max(s.x_rate_residual);
        }
        m
    }

    /// CSV with columns `t,X,V,mean_drift,v_monotone_residual`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CSV_HEADER_COMMENT}").map_err(io_err)?;
        let mut w = csv::WriterBuilder::new().from_writer(out);
        w.write_record(["t", "X", "V", "mean_drift", "v_monotone_residual"]).map_err(csv_err)?;
        for ((t, s), m) in self.times.iter().zip(&self.stats).zip(&self.monitors) {
            w.serialize((t, s.x, s.v, m.mean_drift, m.v_monotone_residual)).map_err(csv_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// One row per agent per recorded time: `t,agent,x0..,v0..`.
    pub fn write_state_dump<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        let d = self.states[0].dim();
        let mut header = vec!["t".to_string(), "agent".to_string()];
        header.extend((0..d).map(|k| format!("x{k}")));
        if self.order == Order::Second {
            header.extend((0..d).map(|k| format!("v{k}")));
        }
        w.write_record(&header).map_err(csv_err)?;
        for s in &self.states {
            for i in 0..s.n_agents() {
                let mut row = vec![s.time.to_string(), i.to_string()];
                row.extend(s.positions.row(i).iter().map(f64::to_string));
                if let Some(v) = &s.velocities {
                    row.extend(v.row(i).iter().map(f64::to_string));
                }
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Reads the format of [`Trajectory::write_state_dump`].
    pub fn read_state_dump<R: BufRead>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let d = header.iter().filter(|h| h.starts_with('x')).count();
        let vd = header.iter().filter(|h| h.starts_with('v')).count();
        if d == 0 || (vd != 0 && vd != d) || header.len() != 2 + d + vd {
            return Err(Error::InvalidArgument(format!("unexpected state dump header {header:?}")));
        }
        let mut rows: Vec<(f64, usize, Vec<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |k: usize| -> Result<f64> {
                rec[k].parse::<f64>().map_err(|e| Error::InvalidArgument(format!("state dump field {:?}: {e}", &rec[k])))
            };
            let agent = rec[1].parse::<usize>().map_err(|e| Error::InvalidArgument(format!("agent index: {e}")))?;
            rows.push((num(0)?, agent, (2..2 + d + vd).map(num).collect::<Result<_>>()?));
        }
        let mut states = Vec::new();
        for group in rows.chunk_by(|a, b| a.0 == b.0) {
            let n = group.len();
            if group.iter().enumerate().any(|(i, r)| r.1 != i) {
                return Err(Error::InvalidArgument(format!("agents out of order at t = {}", group[0].0)));
            }
            let x = AgentMatrix::from_fn(n, d, |i, k| group[i].2[k]);
            let v = (vd > 0).then(|| AgentMatrix::from_fn(n, d, |i, k| group[i].2[d + k]));
            states.push(EnsembleState::new(group[0].0, x, v)?);
        }
        Self::from_states(states)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

fn io_err(e: std::io::Error) -> Error {
    Error::InvalidArgument(format!("io: {e}"))
}

/// Earliest recorded time with `X < tol`.
pub fn detect_consensus(traj: &Trajectory, tol: f64) -> Option<f64> {
    traj.times.iter().zip(&traj.stats).find(|(_, s)| s.x < tol).map(|(t, _)| *t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlockingReport {
    pub v_time: Option<f64>,
    pub x_sup: f64,
}

pub fn detect_flocking(traj: &Trajectory, v_tol: f64) -> FlockingReport {
    FlockingReport {
        v_time: traj.times.iter().zip(&traj.stats).find(|(_, s)| s.v < v_tol).map(|(t, _)| *t),
        x_sup: traj.stats.iter().map(|s| s.x).fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rate: f64,
    pub r_squared: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Least-squares line through `(t, ln value)`; `rate` is minus the slope.
/// Non-positive values are skipped.
pub fn fit_exponential_rate(times: &[f64], values: &[f64]) -> Result<RateFit> {
    if times.len() != values.len() {
        return Err(Error::Dimension(format!("{} times vs {} values", times.len(), values.len())));
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InvalidArgument("fewer than two positive values to fit".into()));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::InvalidArgument("all sample times coincide".into()));
    }
    let slope = sty / stt;
    let intercept = my - slope * mt;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy <= f64::EPSILON * f64::EPSILON * n { 1.0 } else { 1.0 - ss_res / syy };
    Ok(RateFit { rate: -slope, r_squared, intercept, points: pts.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{bernoulli_schedule, example_n4_schedule};
    use crate::state::std_dev;
    use nalgebra::{dmatrix, DMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_schedule() -> WeightSchedule {
        WeightSchedule::constant(WeightMatrix::complete(2))
    }

    fn one() -> Kernel {
        Kernel::constant(1.0).unwrap()
    }

    #[test]
    fn rhs_examples() {
        let s = pair_schedule();
        let st = EnsembleState::first_order(dmatrix![1.0; -1.0]).unwrap();
        assert_eq!(rhs_first_order(0.0, &st, &s, &one()).unwrap(), dmatrix![-1.0; 1.0]);
        let cons = EnsembleState::first_order(dmatrix![0.3; 0.3]).unwrap();
        assert_eq!(rhs_first_order(0.0, &cons, &s, &one()).unwrap(), dmatrix![0.0; 0.0]);
        let st2 = EnsembleState::second_order(dmatrix![0.0; 5.0], dmatrix![1.0; -1.0]).unwrap();
        let (dx, dv) = rhs_second_order(0.0, &st2, &s, &one()).unwrap();
        assert_eq!(dx, dmatrix![1.0; -1.0]);
        assert_eq!(dv, dmatrix![-1.0; 1.0]);
        let aligned = EnsembleState::second_order(dmatrix![0.0; 5.0], dmatrix![2.0; 2.0]).unwrap();
        assert_eq!(rhs_second_order(0.0, &aligned, &s, &one()).unwrap().1, dmatrix![0.0; 0.0]);
        assert!(rhs_second_order(0.0, &st, &s, &one()).is_err());
    }

    #[test]
    fn rhs_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let s = bernoulli_schedule(WeightMatrix::complete(6), 0.5, 0.1, 1, 5.0).unwrap();
        let k = Kernel::power_law(1.0, 1.0, 0.3).unwrap();
        for _ in 0..50 {
            let x = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-3.0..3.0));
            let st = EnsembleState::first_order(x).unwrap();
            let d = rhs_first_order(rng.random_range(0.0..5.0), &st, &s, &k).unwrap();
            assert!(d.row_mean().norm() < 1e-14);
        }
    }

    #[test]
    fn two_agent_exponential_decay() {
        let st = EnsembleState::first_order(dmatrix![1.0; -1.0]).unwrap();
        let opts = IntegrateOptions { step: Some(1e-3), record_every: 1 };
        let traj = integrate(&st, &pair_schedule(), &one(), 1.0, opts).unwrap();
        let last = traj.states.last().unwrap();
        let d = last.positions[(0, 0)] - last.positions[(1, 0)];
        assert!((d - 2.0 * (-1.0f64).exp()).abs() < 1e-8);
        assert!((traj.t_end() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fourth_order_convergence() {
        let st = EnsembleState::first_order(dmatrix![1.0; -1.0; 0.5]).unwrap();
        let s = WeightSchedule::constant(WeightMatrix::complete(3));
        let k = Kernel::power_law(1.0, 1.0, 0.4).unwrap();
        let fine = integrate(&st, &s, &k, 1.0, IntegrateOptions { step: Some(1e-3), ..Default::default() }).unwrap();
        let err = |h| {
            let t = integrate(&st, &s, &k, 1.0, IntegrateOptions { step: Some(h), ..Default::default() }).unwrap();
            (&t.states.last().unwrap().positions - &fine.states.last().unwrap().positions).amax()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn free_flight_is_exact() {
        let x0 = dmatrix![0.0, 1.0; 2.0, -1.0; 0.5, 0.5];
        let v0 = dmatrix![1.0, 0.0; -0.5, 2.0; 0.25, -1.0];
        let st = EnsembleState::second_order(x0.clone(), v0.clone()).unwrap();
        let traj = integrate(&st, &WeightSchedule::zero(3), &one(), 2.0, IntegrateOptions { step: Some(0.01), ..Default::default() }).unwrap();
        for s in &traj.states {
            assert!((&s.positions - (&x0 + &v0 * s.time)).amax() < 1e-12);
            assert_eq!(s.velocities.as_ref().unwrap(), &v0);
        }
        let rep = detect_flocking(&traj, 1e-4);
        assert_eq!(rep.v_time, None);
        let xs = traj.x_series();
        assert!(xs.last().unwrap() > &xs[0]);
    }

    #[test]
    fn breakpoints_are_step_boundaries() {
        let s = example_n4_schedule(1.0).unwrap();
        let st = EnsembleState::second_order(DMatrix::from_fn(4, 2, |i, k| (i + k) as f64), DMatrix::from_fn(4, 2, |i, _| i as f64)).unwrap();
        let traj = integrate(&st, &s, &one(), 2.0, IntegrateOptions { step: Some(0.03), ..Default::default() }).unwrap();
        for k in 1..12 {
            assert!(traj.index_of(k as f64 / 6.0).is_some(), "missing boundary {k}");
        }
        assert!(traj.times.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 0.03 + 1e-12));
    }

    #[test]
    fn conservation_and_weak_dissipation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = Kernel::power_law(1.0, 1.0, 0.25).unwrap();
        let s = bernoulli_schedule(WeightMatrix::complete(5), 0.7, 0.1, 4, 3.0).unwrap();
        for _ in 0..5 {
            let x = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-2.0..2.0) + 7.0);
            let v = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0) + 3.0);
            let first = integrate(&EnsembleState::first_order(x.clone()).unwrap(), &s, &k, 1.0, IntegrateOptions::default()).unwrap();
            let m = first.monitor_maxima();
            assert!(m.mean_drift < 1e-9);
            assert!(m.x_monotone_residual < 1e-10);
            let second = integrate(&EnsembleState::second_order(x, v).unwrap(), &s, &k, 1.0, IntegrateOptions::default()).unwrap();
            let m = second.monitor_maxima();
            assert!(m.velocity_drift < 1e-9 && m.mean_drift < 1e-8);
            assert!(m.v_monotone_residual < 1e-10);
            assert!(m.x_rate_residual < 1e-8);
        }
    }

    #[test]
    fn centering_changes_no_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let s = example_n4_schedule(1.0).unwrap();
        let k = Kernel::power_law(1.0, 1.0, 0.25).unwrap();
        let x = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0) + 5.0);
        let v = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0) - 2.0);
        let raw = EnsembleState::second_order(x, v).unwrap();
        let a = integrate(&raw, &s, &k, 2.0, IntegrateOptions::default()).unwrap();
        let b = integrate(&crate::state::center(&raw), &s, &k, 2.0, IntegrateOptions::default()).unwrap();
        for (p, q) in a.stats.iter().zip(&b.stats) {
            assert!((p.x - q.x).abs() < 1e-12 && (p.v - q.v).abs() < 1e-12);
        }
    }

    #[test]
    fn detection() {
        let st = EnsembleState::first_order(dmatrix![0.2; 0.2; 0.2]).unwrap();
        let traj = integrate(&st, &WeightSchedule::zero(3), &one(), 0.1, IntegrateOptions::default()).unwrap();
        assert_eq!(detect_consensus(&traj, 1e-6), Some(0.0));
        let spread = EnsembleState::first_order(dmatrix![0.0; 1.0; 2.0]).unwrap();
        let traj = integrate(&spread, &WeightSchedule::zero(3), &one(), 1.0, IntegrateOptions::default()).unwrap();
        assert_eq!(detect_consensus(&traj, 0.5), None);
        let aligned = EnsembleState::second_order(dmatrix![0.0; 1.0; 3.0], dmatrix![1.0; 1.0; 1.0]).unwrap();
        let traj = integrate(&aligned, &pair_like(3), &one(), 1.0, IntegrateOptions::default()).unwrap();
        let rep = detect_flocking(&traj, 1e-4);
        assert_eq!(rep.v_time, Some(0.0));
        assert!((rep.x_sup - std_dev(&aligned.positions)).abs() < 1e-12);
    }

    fn pair_like(n: usize) -> WeightSchedule {
        WeightSchedule::constant(WeightMatrix::complete(n))
    }

    #[test]
    fn rate_fit_examples() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let v: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp()).collect();
        let f = fit_exponential_rate(&t, &v).unwrap();
        assert!((f.rate - 2.0).abs() < 1e-10 && (f.r_squared - 1.0).abs() < 1e-12);
        let c = fit_exponential_rate(&t, &vec![3.0; 50]).unwrap();
        assert!(c.rate.abs() < 1e-14);
        assert!(fit_exponential_rate(&t, &vec![0.0; 50]).is_err());
    }

    #[test]
    fn non_finite_state_is_reported() {
        // an unstable step size on a huge initial spread overflows
        let st = EnsembleState::first_order(dmatrix![1e300; -1e300]).unwrap();
        let r = integrate(&st, &pair_schedule(), &one(), 50.0, IntegrateOptions { step: Some(10.0), ..Default::default() });
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn state_dump_round_trip() {
        let s = example_n4_schedule(1.0).unwrap();
        let st = EnsembleState::second_order(DMatrix::from_fn(4, 2, |i, k| (i * 2 + k) as f64 * 0.3), DMatrix::from_fn(4, 2, |i, k| (i as f64 - k as f64) * 0.1)).unwrap();
        let traj = integrate(&st, &s, &Kernel::power_law(1.0, 1.0, 0.25).unwrap(), 0.5, IntegrateOptions::default()).unwrap();
        let mut buf = Vec::new();
        traj.write_state_dump(&mut buf).unwrap();
        let back = Trajectory::read_state_dump(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
        let mut csv = Vec::new();
        traj.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("# flockyap-trajectory v1\nt,X,V,mean_drift,v_monotone_residual\n"));
        assert_eq!(text.lines().count(), traj.len() + 2);
    }
}
