//! The `simulate`, `verify-pe` and `monitor-lyapunov` subcommands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use flockyap::dynamics::{
    detect_consensus, detect_flocking, fit_exponential_rate, integrate, FlockingReport, IntegrateOptions, Order,
    RateFit, StepMonitor, Trajectory,
};
use flockyap::graph::Convention;
use flockyap::kernel::RescaledKernel;
use flockyap::lyapunov::{
    check_consensus_dissipation, check_flocking_dissipation, compute_constants, compute_constants_conservative,
    flocking_bound, x_cal, DissipationReport, FlockingBound, FlockingDissipationReport, FlockingTuning,
    LyapunovConstants, LyapunovContext,
};
use flockyap::pe::{check_pe, check_slot_averages, estimate_pe_params, OffsetSpec, PeCertificate, SlotAverageReport, LAMBDA_TOL};
use flockyap::schedule::WeightSchedule;
use log::info;
use serde::{Deserialize, Serialize};

use crate::scenario::{Built, Scenario};
use crate::{CliError, ConfigError};

/// Fitted decay rates ignore values below this fraction of the initial value,
/// where round-off dominates.
pub const FIT_FLOOR: f64 = 1e-12;

/// Name of the effective scenario written next to the outputs.
pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSummary {
    pub tol: f64,
    pub time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub name: String,
    pub order: Order,
    pub n_agents: usize,
    pub dim: usize,
    pub seed: Option<u64>,
    pub t_end: f64,
    pub step: Option<f64>,
    pub recorded: usize,
    pub x_initial: f64,
    pub v_initial: f64,
    pub x_final: f64,
    pub v_final: f64,
    pub consensus: ConsensusSummary,
    pub flocking: Option<FlockingReport>,
    pub flocking_tol: Option<f64>,
    pub x_rate: Option<RateFit>,
    pub v_rate: Option<RateFit>,
    pub monitor_maxima: StepMonitor,
}

pub fn run_trajectory(scenario: &Scenario, built: &Built) -> Result<Trajectory, CliError> {
    let opts = IntegrateOptions { step: built.step, record_every: scenario.record_every };
    Ok(integrate(&built.initial, &built.schedule, &built.kernel, scenario.t_end, opts)?)
}

fn rate(traj: &Trajectory, values: &[f64]) -> Option<RateFit> {
    let floor = FIT_FLOOR * values.first().copied().unwrap_or(0.0);
    let (t, v): (Vec<f64>, Vec<f64>) = traj.times.iter().zip(values).filter(|(_, v)| **v > floor).map(|(t, v)| (*t, *v)).unzip();
    fit_exponential_rate(&t, &v).ok()
}

pub fn summarize(scenario: &Scenario, built: &Built, traj: &Trajectory) -> SimulateReport {
    let first = traj.stats[0];
    let last = *traj.stats.last().expect("non-empty trajectory");
    let second = traj.order == Order::Second;
    SimulateReport {
        name: scenario.name.clone(),
        order: traj.order,
        n_agents: scenario.n_agents,
        dim: scenario.dim,
        seed: scenario.seed(),
        t_end: traj.t_end(),
        step: built.step,
        recorded: traj.len(),
        x_initial: first.x,
        v_initial: first.v,
        x_final: last.x,
        v_final: last.v,
        consensus: ConsensusSummary { tol: scenario.tolerances.consensus, time: detect_consensus(traj, scenario.tolerances.consensus) },
        flocking: second.then(|| detect_flocking(traj, scenario.tolerances.flocking)),
        flocking_tol: second.then_some(scenario.tolerances.flocking),
        x_rate: rate(traj, &traj.x_series()),
        v_rate: if second { rate(traj, &traj.v_series()) } else { None },
        monitor_maxima: traj.monitor_maxima(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Output { path: path.to_owned(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Output { path: path.to_owned(), source: e.into() })?;
    writeln!(w).and_then(|_| w.flush()).map_err(|source| CliError::Output { path: path.to_owned(), source })
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.to_owned(), source })
}

/// Integrates the scenario and writes the effective scenario, the trajectory
/// CSV, the state dump and the report into `out`.
pub fn simulate(scenario: &Scenario, base_dir: &Path, out: &Path) -> Result<(SimulateReport, Trajectory), CliError> {
    let built = scenario.build(base_dir)?;
    let traj = run_trajectory(scenario, &built)?;
    let report = summarize(scenario, &built, &traj);
    ensure_dir(out)?;
    let mut effective = scenario.clone();
    effective.step = built.step;
    fs::write(out.join(SCENARIO_FILE), effective.to_json() + "\n")
        .map_err(|source| CliError::Output { path: out.join(SCENARIO_FILE), source })?;
    let path = out.join(&scenario.outputs.trajectory);
    let mut w = create(&path)?;
    traj.write_csv(&mut w)?;
    let path = out.join(&scenario.outputs.states);
    let mut w = create(&path)?;
    traj.write_state_dump(&mut w)?;
    write_json(&out.join(&scenario.outputs.report), &report)?;
    info!(
        "{}: X {:.3e} -> {:.3e}, V {:.3e} -> {:.3e} over {} records",
        scenario.name, report.x_initial, report.x_final, report.v_initial, report.v_final, report.recorded
    );
    Ok((report, traj))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeDocument {
    pub certificates: Vec<PeCertificate>,
    pub slot_averages: Vec<SlotAverageReport>,
    pub all_hold: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeRequest {
    pub taus: Vec<f64>,
    pub mu: f64,
    pub horizon: f64,
    pub convention: Convention,
    pub offsets: OffsetSpec,
    /// Also run the slot-average criterion with this many slots per window.
    pub slot_averages: Option<usize>,
}

pub fn verify_pe(schedule: &WeightSchedule, req: &PeRequest) -> Result<PeDocument, CliError> {
    let certificates = req
        .taus
        .iter()
        .map(|&tau| check_pe(schedule, tau, req.mu, req.horizon, req.convention, &req.offsets))
        .collect::<Result<Vec<_>, _>>()
        .map_err(ConfigError::from)?;
    let slot_averages = match req.slot_averages {
        Some(n) => req
            .taus
            .iter()
            .map(|&tau| check_slot_averages(schedule, tau, n, req.mu, req.convention, Some(req.horizon)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(ConfigError::from)?,
        None => Vec::new(),
    };
    let all_hold = certificates.iter().all(|c| c.holds) && slot_averages.iter().all(|p| p.holds);
    Ok(PeDocument { certificates, slot_averages, all_hold })
}

/// PE constant used by the monitors: the configured one, else the certified
/// worst normalized `lambda_2` over `[0, t_end]`.
pub fn resolve_mu(scenario: &Scenario, schedule: &WeightSchedule) -> Result<f64, CliError> {
    if let Some(mu) = scenario.mu {
        return Ok(mu);
    }
    let horizon = scenario.t_end.max(scenario.tau);
    let est = estimate_pe_params(schedule, &[scenario.tau], horizon, Convention::Normalized).map_err(ConfigError::from)?;
    let mu = est[0].1;
    if mu <= LAMBDA_TOL {
        return Err(ConfigError::Invalid(format!("schedule is not PE for tau = {}; set `mu` explicitly", scenario.tau)).into());
    }
    Ok(mu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorOptions {
    pub stride: usize,
    pub vectors: usize,
    pub seed: u64,
}

impl Default for MonitorOptions {
    fn default() -> Self {
        Self { stride: 1, vectors: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusMonitor {
    pub x_cal_initial: f64,
    pub dissipation: DissipationReport,
    pub fitted_rate: Option<f64>,
    /// Fitted rate of `X` is at least `0.9 alpha`.
    pub rate_dominates_alpha: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlockingMonitor {
    pub tuning: FlockingTuning,
    pub report: FlockingDissipationReport,
    pub bound: Option<FlockingBound>,
    /// `V` at the last recorded time not after `T_eps0`, when the run reaches `T_eps0`.
    pub v_at_t_eps0: Option<f64>,
    pub bound_holds: Option<bool>,
    /// `sup X` over `[0, min(T_eps0, t_end)]`.
    pub x_sup: f64,
    pub within_critical_radius: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub name: String,
    pub order: Order,
    pub tau: f64,
    pub mu: f64,
    pub constants: LyapunovConstants,
    pub conservative_constants: LyapunovConstants,
    pub consensus: Option<ConsensusMonitor>,
    pub flocking: Option<FlockingMonitor>,
    pub ok: bool,
}

/// Slack on the fitted-rate comparison with the theoretical rate.
pub const RATE_SLACK: f64 = 0.1;

pub fn monitor_lyapunov(
    scenario: &Scenario,
    built: &Built,
    traj: &Trajectory,
    opts: MonitorOptions,
) -> Result<MonitorReport, CliError> {
    let (schedule, kernel, tau) = (&built.schedule, &built.kernel, scenario.tau);
    let mu = resolve_mu(scenario, schedule)?;
    let constants = compute_constants(traj, kernel, schedule, tau, mu)?;
    let conservative = compute_constants_conservative(traj, kernel, schedule, tau, mu, traj.t_end())?;
    let ctx = LyapunovContext::new(traj, schedule, kernel, tau)?;
    let mut report = MonitorReport {
        name: scenario.name.clone(),
        order: traj.order,
        tau,
        mu,
        constants,
        conservative_constants: conservative,
        consensus: None,
        flocking: None,
        ok: true,
    };
    match traj.order {
        Order::First => {
            let dissipation = check_consensus_dissipation(&ctx, &constants, opts.stride)?;
            let fitted_rate = rate(traj, &traj.x_series()).map(|f| f.rate);
            let rate_dominates_alpha = fitted_rate.map(|r| r >= (1.0 - RATE_SLACK) * constants.alpha);
            report.ok = dissipation.within_slack && rate_dominates_alpha != Some(false);
            report.consensus = Some(ConsensusMonitor {
                x_cal_initial: x_cal(&ctx, traj.times[0], &constants)?,
                dissipation,
                fitted_rate,
                rate_dominates_alpha,
            });
        }
        Order::Second => {
            let eps0 = scenario.eps0.unwrap_or_else(|| FlockingTuning::eps0_for_horizon(scenario.t_end));
            let tuning = FlockingTuning::new(eps0, conservative.c, tau)?;
            let stats0 = traj.stats[0];
            let rk = RescaledKernel::new(kernel.clone(), scenario.n_agents, tau, stats0.v, stats0.x)?;
            let fl = check_flocking_dissipation(&ctx, &tuning, mu, &rk, opts.stride, opts.vectors, opts.seed)?;
            let bound = match kernel.floor_constants() {
                Some(h) if h.beta_admissible() => Some(flocking_bound(&tuning, mu, &rk, h)?),
                _ => None,
            };
            let reach = tuning.t_eps0.min(traj.t_end());
            let x_sup = traj.times.iter().zip(&traj.stats).take_while(|(t, _)| **t <= reach * (1.0 + 1e-12)).map(|(_, s)| s.x).fold(0.0, f64::max);
            let v_at_t_eps0 = (tuning.t_eps0 <= traj.t_end() * (1.0 + 1e-12))
                .then(|| traj.index_at_or_before(tuning.t_eps0).map(|k| traj.stats[k].v))
                .flatten();
            let bound_holds = bound.zip(v_at_t_eps0).map(|(b, v)| v <= b.v_bound_at_t);
            let within_critical_radius = bound.map(|b| x_sup <= b.x_m);
            report.ok = fl.dissipation.within_slack
                && fl.window_inequality.holds
                && bound_holds != Some(false)
                && within_critical_radius != Some(false);
            report.flocking = Some(FlockingMonitor { tuning, report: fl, bound, v_at_t_eps0, bound_holds, x_sup, within_critical_radius });
        }
    }
    Ok(report)
}

/// Reads a state dump written by `simulate`.
pub fn read_states(path: &Path) -> Result<Trajectory, CliError> {
    let file = File::open(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
    Ok(Trajectory::read_state_dump(BufReader::new(file)).map_err(ConfigError::from)?)
}

pub fn write_report<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    ensure_dir(out)?;
    let path = out.join(name);
    write_json(&path, value)?;
    Ok(path)
}
