//! Piecewise-constant communication-weight schedules `xi_ij(t)`.
//!
//! Every schedule is constant on half-open cells `[k m, (k+1) m)` of its
//! mesh `m` (table schedules use their own breakpoints instead), and sampling
//! is right-continuous.

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::graph::WeightMatrix;
use crate::{Error, Result};

/// Times within this fraction of a mesh length from a cell boundary are
/// snapped onto it.
const SNAP_REL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Constant(WeightMatrix),
    Periodic { mesh: f64, slots: Vec<WeightMatrix> },
    Bernoulli { base: WeightMatrix, p: f64, mesh: f64, seed: u64, horizon: f64 },
    Table { starts: Vec<f64>, values: Vec<WeightMatrix>, horizon: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSchedule {
    n_agents: usize,
    kind: Kind,
}

/// A maximal interval `[start, end)` on which the schedule is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub start: f64,
    pub end: f64,
    pub weights: WeightMatrix,
}

fn cell_index(t: f64, mesh: f64) -> i64 {
    let q = t / mesh;
    let r = q.round();
    if (q - r).abs() < SNAP_REL {
        r as i64
    } else {
        q.floor() as i64
    }
}

fn check_mesh(mesh: f64) -> Result<()> {
    if mesh.is_finite() && mesh > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidSchedule(format!("mesh must be positive, got {mesh}")))
    }
}

impl WeightSchedule {
    pub fn constant(w: WeightMatrix) -> Self {
        Self { n_agents: w.n_agents(), kind: Kind::Constant(w) }
    }

    pub fn zero(n: usize) -> Self {
        Self::constant(WeightMatrix::zeros(n))
    }

    /// Cycles through `slots`, holding each for one mesh length.
    pub fn periodic(mesh: f64, slots: Vec<WeightMatrix>) -> Result<Self> {
        check_mesh(mesh)?;
        let n = slots.first().ok_or_else(|| Error::InvalidSchedule("no slots".into()))?.n_agents();
        if slots.iter().any(|s| s.n_agents() != n) {
            return Err(Error::InvalidSchedule("slots disagree on the number of agents".into()));
        }
        Ok(Self { n_agents: n, kind: Kind::Periodic { mesh, slots } })
    }

    /// Pieces `(t_start, weights)` with increasing starts, held up to the
    /// next start and the last up to `horizon`. Zero weights before the first start.
    pub fn table(pieces: Vec<(f64, WeightMatrix)>, horizon: f64) -> Result<Self> {
        let n = pieces.first().ok_or_else(|| Error::InvalidSchedule("empty table".into()))?.1.n_agents();
        let mut starts = Vec::with_capacity(pieces.len() + 1);
        let mut values = Vec::with_capacity(pieces.len() + 1);
        for (t, w) in pieces {
            if w.n_agents() != n {
                return Err(Error::InvalidSchedule("table rows disagree on the number of agents".into()));
            }
            if !(t >= 0.0 && t.is_finite()) || starts.last().is_some_and(|&p| t <= p) {
                return Err(Error::InvalidSchedule(format!("table start {t} is negative or not increasing")));
            }
            starts.push(t);
            values.push(w);
        }
        if starts[0] > 0.0 {
            starts.insert(0, 0.0);
            values.insert(0, WeightMatrix::zeros(n));
        }
        if !(horizon > *starts.last().unwrap()) || !horizon.is_finite() {
            return Err(Error::InvalidSchedule(format!("horizon {horizon} must exceed the last table start")));
        }
        Ok(Self { n_agents: n, kind: Kind::Table { starts, values, horizon } })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Length of the constancy cells; for tables, the shortest piece.
    pub fn mesh(&self) -> Option<f64> {
        match &self.kind {
            Kind::Constant(_) => None,
            Kind::Periodic { mesh, .. } | Kind::Bernoulli { mesh, .. } => Some(*mesh),
            Kind::Table { starts, horizon, .. } => {
                let mut ends = starts[1..].to_vec();
                ends.push(*horizon);
                starts.iter().zip(&ends).map(|(a, b)| b - a).reduce(f64::min)
            }
        }
    }

    pub fn period(&self) -> Option<f64> {
        match &self.kind {
            Kind::Periodic { mesh, slots } => Some(mesh * slots.len() as f64),
            _ => None,
        }
    }

    /// End of the defined time range; `None` for constant and periodic schedules.
    pub fn horizon(&self) -> Option<f64> {
        match &self.kind {
            Kind::Bernoulli { horizon, .. } | Kind::Table { horizon, .. } => Some(*horizon),
            _ => None,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, Kind::Constant(_))
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("schedule sampled at negative time {t}")));
        }
        if let Some(h) = self.horizon() {
            if t > h * (1.0 + 1e-12) {
                return Err(Error::BeyondHorizon { t, horizon: h });
            }
        }
        Ok(())
    }

    pub fn sample(&self, t: f64) -> Result<WeightMatrix> {
        self.check_time(t)?;
        Ok(match &self.kind {
            Kind::Constant(w) => w.clone(),
            Kind::Periodic { mesh, .. } | Kind::Bernoulli { mesh, .. } => self.cell_weights(cell_index(t, *mesh)),
            Kind::Table { starts, values, .. } => values[table_index(starts, t)].clone(),
        })
    }

    fn cell_weights(&self, k: i64) -> WeightMatrix {
        match &self.kind {
            Kind::Periodic { slots, .. } => slots[k.rem_euclid(slots.len() as i64) as usize].clone(),
            Kind::Bernoulli { base, p, seed, .. } => bernoulli_cell(base, *p, *seed, k.max(0) as u64),
            _ => unreachable!("only mesh-based schedules have cells"),
        }
    }

    /// Constant pieces covering `[t0, t1]`, clipped to it. Consecutive pieces
    /// may carry equal weights when the schedule does not change across a cell.
    pub fn pieces(&self, t0: f64, t1: f64) -> Result<Vec<Piece>> {
        if !(t0 <= t1) {
            return Err(Error::InvalidArgument(format!("interval [{t0}, {t1}] is empty")));
        }
        self.check_time(t0)?;
        self.check_time(t1)?;
        let mut out = Vec::new();
        match &self.kind {
            Kind::Constant(w) => out.push(Piece { start: t0, end: t1, weights: w.clone() }),
            Kind::Periodic { mesh, .. } | Kind::Bernoulli { mesh, .. } => {
                let mesh = *mesh;
                let mut k = cell_index(t0, mesh);
                let mut start = t0;
                loop {
                    let boundary = (k + 1) as f64 * mesh;
                    let end = if boundary >= t1 - SNAP_REL * mesh { t1 } else { boundary };
                    out.push(Piece { start, end, weights: self.cell_weights(k) });
                    if end == t1 {
                        break;
                    }
                    start = end;
                    k += 1;
                }
            }
            Kind::Table { starts, values, .. } => {
                let mut i = table_index(starts, t0);
                let mut start = t0;
                loop {
                    let end = starts.get(i + 1).copied().filter(|&b| b < t1).unwrap_or(t1);
                    out.push(Piece { start, end, weights: values[i].clone() });
                    if end == t1 {
                        break;
                    }
                    start = end;
                    i += 1;
                }
            }
        }
        Ok(out)
    }

    /// Discontinuity instants strictly inside `(t0, t1)`, sorted.
    pub fn breakpoints(&self, t0: f64, t1: f64) -> Result<Vec<f64>> {
        let pieces = self.pieces(t0, t1)?;
        Ok(pieces
            .windows(2)
            .filter(|w| w[0].weights != w[1].weights)
            .map(|w| w[1].start)
            .filter(|&b| b > t0 && b < t1)
            .collect())
    }

    /// Cell boundaries `k * mesh` (or table starts) inside `(t0, t1)`, whether
    /// or not the weights change there.
    pub(crate) fn cell_boundaries(&self, t0: f64, t1: f64) -> Result<Vec<f64>> {
        Ok(self.pieces(t0, t1)?.iter().skip(1).map(|p| p.start).collect())
    }

    /// `(1/tau) integral_t^{t+tau} xi(s) ds`, exact.
    pub fn window_average(&self, t: f64, tau: f64) -> Result<WeightMatrix> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("window length must be positive, got {tau}")));
        }
        let pieces = self.pieces(t, t + tau)?;
        WeightMatrix::combination(self.n_agents, pieces.iter().map(|p| ((p.end - p.start) / tau, &p.weights)))
    }
}

fn table_index(starts: &[f64], t: f64) -> usize {
    starts.partition_point(|&s| s <= t + SNAP_REL * s.abs().max(1.0)).saturating_sub(1)
}

/// Weights of Bernoulli cell `k`, drawn from an independent stream so any
/// cell can be regenerated without the ones before it.
fn bernoulli_cell(base: &WeightMatrix, p: f64, seed: u64, k: u64) -> WeightMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    let n = base.n_agents();
    let mut m = base.matrix().clone();
    for i in 0..n {
        for j in (i + 1)..n {
            if m[(i, j)] > 0.0 && rng.random::<f64>() >= p {
                m[(i, j)] = 0.0;
                m[(j, i)] = 0.0;
            }
        }
    }
    WeightMatrix::new(m).expect("subgraph of a valid weight matrix")
}

/// Each edge of `base` is kept independently with probability `p` on every
/// mesh cell of `[0, horizon]`.
pub fn bernoulli_schedule(base: WeightMatrix, p: f64, mesh: f64, seed: u64, horizon: f64) -> Result<WeightSchedule> {
    check_mesh(mesh)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidSchedule(format!("probability {p} outside [0, 1]")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidSchedule(format!("horizon must be positive, got {horizon}")));
    }
    Ok(WeightSchedule { n_agents: base.n_agents(), kind: Kind::Bernoulli { base, p, mesh, seed, horizon } })
}

/// Four agents, mesh `tau / 6`, period six cells. Cells 1, 3 and 5 switch on
/// the edges {0,3}, {2,3} and {1,2} + {1,3}; cells 0, 2 and 4 are empty.
pub fn example_n4_schedule(tau: f64) -> Result<WeightSchedule> {
    if !(tau > 0.0) {
        return Err(Error::InvalidSchedule(format!("tau must be positive, got {tau}")));
    }
    let empty = WeightMatrix::zeros(4);
    let slots = vec![
        empty.clone(),
        WeightMatrix::from_edges(4, &[(0, 3, 1.0)])?,
        empty.clone(),
        WeightMatrix::from_edges(4, &[(2, 3, 1.0)])?,
        empty,
        WeightMatrix::from_edges(4, &[(1, 2, 1.0), (1, 3, 1.0)])?,
    ];
    WeightSchedule::periodic(tau / 6.0, slots)
}

#[derive(Debug, Deserialize)]
struct TableRow {
    t_start: f64,
    i: usize,
    j: usize,
    weight: f64,
}

/// Reads a table schedule from CSV rows `t_start,i,j,weight` (0-based agent
/// indices, header line required, `#` comments allowed). Pairs not listed for
/// a start time have zero weight on that piece.
pub fn table_from_csv<R: Read>(reader: R, n_agents: usize, horizon: f64) -> Result<WeightSchedule> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let mut rows: Vec<TableRow> = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec.map_err(|e| Error::InvalidSchedule(format!("table csv: {e}")))?);
    }
    rows.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    let mut pieces: Vec<(f64, WeightMatrix)> = Vec::new();
    for chunk in rows.chunk_by(|a, b| a.t_start == b.t_start) {
        let edges: Vec<_> = chunk.iter().map(|r| (r.i, r.j, r.weight)).collect();
        pieces.push((chunk[0].t_start, WeightMatrix::from_edges(n_agents, &edges)?));
    }
    WeightSchedule::table(pieces, horizon)
}
