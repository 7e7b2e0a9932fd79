//! JSON scenario documents and their conversion into model objects.

use std::fs;
use std::path::{Path, PathBuf};

use flockyap::dynamics::{Order, DEFAULT_CONSENSUS_TOL, DEFAULT_FLOCKING_TOL};
use flockyap::graph::WeightMatrix;
use flockyap::kernel::{Kernel, KernelSpec};
use flockyap::schedule::{bernoulli_schedule, example_n4_schedule, table_from_csv, WeightSchedule};
use flockyap::state::{from_rows, mean, std_devs, EnsembleState};
use flockyap::AgentMatrix;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

/// Relative mismatch below which `mesh / step` counts as an integer.
const STEP_FIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub order: Order,
    pub n_agents: usize,
    pub dim: usize,
    pub initial_state: InitialState,
    pub kernel: KernelSpec,
    pub schedule: ScheduleSpec,
    pub tau: f64,
    /// PE constant (normalized convention); `None` uses the certified worst window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default = "one")]
    pub record_every: usize,
    /// Velocity-functional parameter; `None` picks `1 / (2 sqrt(t_end))`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps0: Option<f64>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub outputs: Outputs,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    Inline {
        positions: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        velocities: Option<Vec<Vec<f64>>>,
    },
    /// Independent uniform coordinates in `[-half_width, half_width]`,
    /// optionally rescaled about the mean to prescribed `X(0)`, `V(0)`.
    /// `center` moves both means to the origin; with a zero mean velocity,
    /// `V` can decay far below the round-off level of the mean.
    UniformBox {
        seed: u64,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        center: bool,
        #[serde(default = "unit")]
        position_half_width: f64,
        #[serde(default = "unit")]
        velocity_half_width: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x0: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        v0: Option<f64>,
    },
}

fn unit() -> f64 {
    1.0
}

/// Edge lists are `[i, j, weight]` triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Complete,
    Zero,
    Constant {
        weights: Vec<Vec<f64>>,
    },
    Periodic {
        mesh: f64,
        slots: Vec<Vec<(usize, usize, f64)>>,
    },
    ExampleN4 {
        tau: f64,
    },
    Bernoulli {
        /// Dense base weights; `None` is the complete graph.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base: Option<Vec<Vec<f64>>>,
        p: f64,
        mesh: f64,
        seed: u64,
        horizon: f64,
    },
    /// Rows `t_start, i, j, weight`, inline or from a CSV file resolved
    /// against the config file's directory.
    Table {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rows: Option<Vec<(f64, usize, usize, f64)>>,
        horizon: f64,
    },
    /// Complete graphs on agents `0..split` and `split..n`, never linked.
    TwoComponent {
        split: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub consensus: f64,
    pub flocking: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { consensus: DEFAULT_CONSENSUS_TOL, flocking: DEFAULT_FLOCKING_TOL }
    }
}

/// Output file names, relative to `--out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub trajectory: String,
    pub states: String,
    pub report: String,
    pub verbosity: String,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            trajectory: "trajectory.csv".into(),
            states: "states.csv".into(),
            report: "report.json".into(),
            verbosity: "info".into(),
        }
    }
}

/// Model objects built from a scenario.
#[derive(Debug, Clone)]
pub struct Built {
    pub initial: EnsembleState,
    pub kernel: Kernel,
    pub schedule: WeightSchedule,
    /// Step after fitting it to the schedule mesh.
    pub step: Option<f64>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Replaces every seed in the scenario.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let InitialState::UniformBox { seed: s, .. } = &mut self.initial_state {
            *s = seed;
        }
        if let ScheduleSpec::Bernoulli { seed: s, .. } = &mut self.schedule {
            *s = seed;
        }
        self
    }

    /// Seed of the first random field, if any.
    pub fn seed(&self) -> Option<u64> {
        match (&self.initial_state, &self.schedule) {
            (InitialState::UniformBox { seed, .. }, _) | (_, ScheduleSpec::Bernoulli { seed, .. }) => Some(*seed),
            _ => None,
        }
    }

    /// Validates the scenario and builds its model objects. Relative table
    /// paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Built, ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.n_agents < 2 || self.dim == 0 {
            return invalid(format!("need n_agents >= 2 and dim >= 1, got {} and {}", self.n_agents, self.dim));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return invalid(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return invalid(format!("t_end must be positive, got {}", self.t_end));
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0 && mu <= 1.0) {
                return invalid(format!("mu must lie in (0, 1], got {mu}"));
            }
        }
        if let Some(e) = self.eps0 {
            if !(e > 0.0 && e.is_finite()) {
                return invalid(format!("eps0 must be positive, got {e}"));
            }
        }
        if self.record_every == 0 {
            return invalid("record_every must be at least 1".into());
        }
        let kernel = Kernel::try_from(self.kernel.clone())?;
        let initial = self.initial_state()?;
        let schedule = self.schedule_object(base_dir)?;
        if let Some(h) = schedule.horizon() {
            if self.t_end > h {
                return invalid(format!("t_end = {} exceeds the schedule horizon {h}", self.t_end));
            }
        }
        let step = match self.step {
            None => None,
            Some(h) if !(h > 0.0 && h.is_finite()) => return invalid(format!("step must be positive, got {h}")),
            Some(h) => Some(self.fit_step(h, &schedule)),
        };
        Ok(Built { initial, kernel, schedule, step })
    }

    fn fit_step(&self, h: f64, schedule: &WeightSchedule) -> f64 {
        let Some(mesh) = schedule.mesh() else { return h };
        let ratio = mesh / h;
        if (ratio - ratio.round()).abs() <= STEP_FIT_TOL * ratio && ratio.round() >= 1.0 {
            return h;
        }
        let fitted = mesh / ratio.ceil();
        warn!("step {h} does not divide the mesh {mesh}; using {fitted}");
        fitted
    }

    fn initial_state(&self) -> Result<EnsembleState, ConfigError> {
        let (n, d) = (self.n_agents, self.dim);
        let second = self.order == Order::Second;
        let state = match &self.initial_state {
            InitialState::Inline { positions, velocities } => {
                let x = from_rows(positions)?;
                let v = velocities.as_deref().map(from_rows).transpose()?;
                if x.shape() != (n, d) || v.as_ref().is_some_and(|v| v.shape() != (n, d)) {
                    return Err(ConfigError::Invalid(format!("initial data must be {n} x {d}")));
                }
                if second != v.is_some() {
                    return Err(ConfigError::Invalid(format!("{:?} order run with velocities = {}", self.order, v.is_some())));
                }
                EnsembleState::new(0.0, x, v)?
            }
            InitialState::UniformBox { seed, center, position_half_width, velocity_half_width, x0, v0 } => {
                if !(*position_half_width > 0.0) || !(*velocity_half_width > 0.0) {
                    return Err(ConfigError::Invalid("box half-widths must be positive".into()));
                }
                if v0.is_some() && !second {
                    return Err(ConfigError::Invalid("v0 given for a first-order run".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut draw = |a: f64| AgentMatrix::from_fn(n, d, |_, _| rng.random_range(-a..a));
                let x = rescale(draw(*position_half_width), *x0, *center)?;
                let v = second.then(|| rescale(draw(*velocity_half_width), *v0, *center)).transpose()?;
                EnsembleState::new(0.0, x, v)?
            }
        };
        Ok(state)
    }

    fn schedule_object(&self, base_dir: &Path) -> Result<WeightSchedule, ConfigError> {
        let n = self.n_agents;
        let s = match &self.schedule {
            ScheduleSpec::Complete => WeightSchedule::constant(WeightMatrix::complete(n)),
            ScheduleSpec::Zero => WeightSchedule::zero(n),
            ScheduleSpec::Constant { weights } => WeightSchedule::constant(WeightMatrix::from_rows(weights)?),
            ScheduleSpec::Periodic { mesh, slots } => WeightSchedule::periodic(
                *mesh,
                slots.iter().map(|e| WeightMatrix::from_edges(n, e)).collect::<Result<_, _>>()?,
            )?,
            ScheduleSpec::ExampleN4 { tau } => example_n4_schedule(*tau)?,
            ScheduleSpec::Bernoulli { base, p, mesh, seed, horizon } => {
                let base = match base {
                    Some(rows) => WeightMatrix::from_rows(rows)?,
                    None => WeightMatrix::complete(n),
                };
                bernoulli_schedule(base, *p, *mesh, *seed, *horizon)?
            }
            ScheduleSpec::Table { path, rows, horizon } => match (path, rows) {
                (Some(p), None) => {
                    let full = base_dir.join(p);
                    let file = fs::File::open(&full).map_err(|source| ConfigError::Io { path: full, source })?;
                    table_from_csv(file, n, *horizon)?
                }
                (None, Some(rows)) => {
                    let mut text = String::from("t_start,i,j,weight\n");
                    for (t, i, j, w) in rows {
                        text.push_str(&format!("{t},{i},{j},{w}\n"));
                    }
                    table_from_csv(text.as_bytes(), n, *horizon)?
                }
                _ => return Err(ConfigError::Invalid("table schedule needs exactly one of `path` and `rows`".into())),
            },
            ScheduleSpec::TwoComponent { split } => {
                if *split == 0 || *split >= n {
                    return Err(ConfigError::Invalid(format!("split {split} must lie in 1..{n}")));
                }
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in (i + 1)..n {
                        if (i < *split) == (j < *split) {
                            edges.push((i, j, 1.0));
                        }
                    }
                }
                WeightSchedule::constant(WeightMatrix::from_edges(n, &edges)?)
            }
        };
        if s.n_agents() != n {
            return Err(ConfigError::Invalid(format!("schedule has {} agents, scenario {n}", s.n_agents())));
        }
        Ok(s)
    }
}

/// Scales deviations from the mean so that the standard deviation becomes
/// `target`; the mean is kept unless `center` is set.
fn rescale(x: AgentMatrix, target: Option<f64>, center: bool) -> Result<AgentMatrix, ConfigError> {
    let m = mean(&x);
    let mut dev = x;
    for mut row in dev.row_iter_mut() {
        row -= &m;
    }
    if let Some(target) = target {
        if !(target >= 0.0 && target.is_finite()) {
            return Err(ConfigError::Invalid(format!("target deviation must be non-negative, got {target}")));
        }
        let sd = std_devs(&EnsembleState::first_order(dev.clone())?).x;
        if sd == 0.0 {
            return Err(ConfigError::Invalid("cannot rescale a consensus configuration".into()));
        }
        dev *= target / sd;
    }
    if !center {
        for mut row in dev.row_iter_mut() {
            row += &m;
        }
    }
    Ok(dev)
}
