//! One-parameter sweeps over a numeric scenario field.

use std::io::Write;
use std::path::Path;

use flockyap::dynamics::Order;
use flockyap::kernel::RescaledKernel;
use flockyap::lyapunov::{compute_constants_conservative, flocking_bound, FlockingTuning};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::{resolve_mu, run_trajectory, summarize};
use crate::scenario::Scenario;
use crate::{CliError, ConfigError};

/// A dotted path into the scenario JSON (`kernel.beta`, `eps0`, ...) and the
/// values to visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub path: String,
    pub values: Vec<f64>,
}

impl Axis {
    /// `n` log-spaced values from `lo` to `hi` inclusive.
    pub fn logspace(path: &str, lo: f64, hi: f64, n: usize) -> Result<Self, ConfigError> {
        if !(lo > 0.0 && hi > 0.0) {
            return Err(ConfigError::Invalid(format!("log-spaced axis needs positive ends, got {lo}, {hi}")));
        }
        let values = match n {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect(),
        };
        Ok(Self { path: path.into(), values })
    }
}

/// Sets the field at `path` to `value`. The field must be numeric, or an
/// optional field that is currently unset.
pub fn apply(scenario: &Scenario, path: &str, value: f64) -> Result<Scenario, ConfigError> {
    let mut doc = serde_json::to_value(scenario)?;
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| ConfigError::Invalid("empty sweep path".into()))?;
    let mut node = &mut doc;
    for k in keys {
        node = match node {
            Value::Object(m) => m.get_mut(k),
            Value::Array(a) => k.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| ConfigError::Invalid(format!("sweep path `{path}` does not exist")))?;
    }
    let Value::Object(m) = node else {
        return Err(ConfigError::Invalid(format!("sweep path `{path}` does not name an object field")));
    };
    match m.get(last) {
        Some(Value::Number(_)) | Some(Value::Null) | None => {}
        Some(_) => return Err(ConfigError::Invalid(format!("sweep field `{path}` is not numeric"))),
    }
    let num = if value.fract() == 0.0 && value >= 0.0 && value < 2f64.powi(53) {
        // integer-valued fields (seeds, counts) reject 3.0
        Value::from(value as u64)
    } else {
        serde_json::Number::from_f64(value).map(Value::Number).ok_or_else(|| ConfigError::Invalid(format!("non-finite value {value}")))?
    };
    m.insert(last.to_string(), num);
    Ok(serde_json::from_value(doc)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub value: f64,
    pub ok: bool,
    pub error: Option<String>,
    pub x_final: Option<f64>,
    pub v_final: Option<f64>,
    pub consensus_time: Option<f64>,
    pub flocking_time: Option<f64>,
    pub x_sup: Option<f64>,
    pub x_rate: Option<f64>,
    pub x_r_squared: Option<f64>,
    pub v_rate: Option<f64>,
    pub v_r_squared: Option<f64>,
    pub eps0: Option<f64>,
    pub t_eps0: Option<f64>,
    pub v_at_t_eps0: Option<f64>,
    pub v_bound_at_t: Option<f64>,
    pub asymptotic_bound: Option<f64>,
    pub x_m: Option<f64>,
}

fn run_row(base: &Scenario, base_dir: &Path, axis: &Axis, index: usize) -> SweepRow {
    let value = axis.values[index];
    let mut row = SweepRow { index, value, ..Default::default() };
    if let Err(e) = fill_row(base, base_dir, axis, &mut row) {
        row.ok = false;
        row.error = Some(e.to_string());
    }
    row
}

fn fill_row(base: &Scenario, base_dir: &Path, axis: &Axis, row: &mut SweepRow) -> Result<(), CliError> {
    let scenario = apply(base, &axis.path, row.value)?;
    let built = scenario.build(base_dir)?;
    let traj = run_trajectory(&scenario, &built)?;
    let rep = summarize(&scenario, &built, &traj);
    row.x_final = Some(rep.x_final);
    row.v_final = Some(rep.v_final);
    row.consensus_time = rep.consensus.time;
    row.x_rate = rep.x_rate.map(|f| f.rate);
    row.x_r_squared = rep.x_rate.map(|f| f.r_squared);
    row.v_rate = rep.v_rate.map(|f| f.rate);
    row.v_r_squared = rep.v_rate.map(|f| f.r_squared);
    if let Some(fl) = rep.flocking {
        row.flocking_time = fl.v_time;
        row.x_sup = Some(fl.x_sup);
    }
    if traj.order == Order::Second {
        if let Some(hyp) = built.kernel.floor_constants().filter(|h| h.beta_admissible()) {
            let mu = resolve_mu(&scenario, &built.schedule)?;
            let cons = compute_constants_conservative(&traj, &built.kernel, &built.schedule, scenario.tau, mu, traj.t_end())?;
            let eps0 = scenario.eps0.unwrap_or_else(|| FlockingTuning::eps0_for_horizon(scenario.t_end));
            let tuning = FlockingTuning::new(eps0, cons.c, scenario.tau)?;
            let s0 = traj.stats[0];
            let rk = RescaledKernel::new(built.kernel.clone(), scenario.n_agents, scenario.tau, s0.v, s0.x)?;
            let b = flocking_bound(&tuning, mu, &rk, hyp)?;
            row.eps0 = Some(eps0);
            row.t_eps0 = Some(tuning.t_eps0);
            row.v_bound_at_t = Some(b.v_bound_at_t);
            row.asymptotic_bound = Some(b.asymptotic_bound);
            row.x_m = Some(b.x_m);
            if tuning.t_eps0 <= traj.t_end() * (1.0 + 1e-12) {
                row.v_at_t_eps0 = traj.index_at_or_before(tuning.t_eps0).map(|k| traj.stats[k].v);
            }
        }
    }
    row.ok = true;
    Ok(())
}

/// Runs every axis point on the current rayon pool; rows come back in axis
/// order and a failing point only marks its own row.
pub fn sweep(base: &Scenario, base_dir: &Path, axis: &Axis) -> Vec<SweepRow> {
    (0..axis.values.len()).into_par_iter().map(|k| run_row(base, base_dir, axis, k)).collect()
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        // serialize() derives the header from the first row
        w.write_record(HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const HEADER: [&str; 19] = [
    "index",
    "value",
    "ok",
    "error",
    "x_final",
    "v_final",
    "consensus_time",
    "flocking_time",
    "x_sup",
    "x_rate",
    "x_r_squared",
    "v_rate",
    "v_r_squared",
    "eps0",
    "t_eps0",
    "v_at_t_eps0",
    "v_bound_at_t",
    "asymptotic_bound",
    "x_m",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{InitialState, Outputs, ScheduleSpec, Tolerances};
    use flockyap::kernel::KernelSpec;

    fn base() -> Scenario {
        Scenario {
            name: "sweep".into(),
            order: Order::First,
            n_agents: 3,
            dim: 1,
            initial_state: InitialState::UniformBox {
                seed: 1,
                center: false,
                position_half_width: 1.0,
                velocity_half_width: 1.0,
                x0: None,
                v0: None,
            },
            kernel: KernelSpec::Constant { value: 1.0 },
            schedule: ScheduleSpec::Complete,
            tau: 1.0,
            mu: None,
            t_end: 1.0,
            step: Some(0.01),
            record_every: 1,
            eps0: None,
            tolerances: Tolerances::default(),
            outputs: Outputs::default(),
        }
    }

    #[test]
    fn apply_sets_nested_and_optional_fields() {
        let s = apply(&base(), "kernel.value", 0.5).unwrap();
        assert_eq!(s.kernel, KernelSpec::Constant { value: 0.5 });
        assert_eq!(apply(&base(), "eps0", 0.25).unwrap().eps0, Some(0.25));
        assert!(matches!(apply(&base(), "initial_state.seed", 9.0).unwrap().initial_state, InitialState::UniformBox { seed: 9, .. }));
        assert_eq!(apply(&base(), "t_end", 2.0).unwrap().t_end, 2.0);
        assert!(apply(&base(), "name", 1.0).is_err());
        assert!(apply(&base(), "kernel.nope.x", 1.0).is_err());
        assert!(apply(&base(), "", 1.0).is_err());
    }

    #[test]
    fn rows_keep_axis_order_and_isolate_failures() {
        let axis = Axis { path: "kernel.value".into(), values: vec![0.5, -1.0, 2.0] };
        let rows = sweep(&base(), Path::new("."), &axis);
        assert_eq!(rows.iter().map(|r| r.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(rows[0].ok && !rows[1].ok && rows[2].ok);
        assert!(rows[1].error.as_deref().unwrap().contains("invalid"));
        assert!(rows[2].x_rate.unwrap() > rows[0].x_rate.unwrap());
    }

    #[test]
    fn empty_axis_gives_header_only() {
        let rows = sweep(&base(), Path::new("."), &Axis { path: "t_end".into(), values: vec![] });
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }

    #[test]
    fn header_matches_serialized_rows() {
        let mut buf = Vec::new();
        write_csv(&[SweepRow::default()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), HEADER.join(","));
    }

    #[test]
    fn logspace_endpoints() {
        let a = Axis::logspace("eps0", 0.01, 1.0, 3).unwrap();
        assert!((a.values[1] - 0.1).abs() < 1e-15 && a.values[2] == 1.0);
        assert!(Axis::logspace("eps0", 0.0, 1.0, 3).is_err());
    }
}
