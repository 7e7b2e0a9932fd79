//! Ensemble states and the variance bilinear form.
//!
//! For `x, y` in `(R^d)^N` the variance form is
//!
//! ```text
//! B(x, y) = (1/N) sum_i <x_i, y_i> - <mean(x), mean(y)>
//! ```
//!
//! It is evaluated on centered data, which is algebraically identical and
//! avoids cancellation when the ensemble sits far from the origin.

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use crate::{AgentMatrix, Error, Result};

/// Below this standard deviation an ensemble is treated as converged and
/// quotients by `X` or `V` are not evaluated.
pub const CONVERGED_DEVIATION: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub time: f64,
    pub positions: AgentMatrix,
    /// Present exactly for second-order runs.
    pub velocities: Option<AgentMatrix>,
}

impl EnsembleState {
    pub fn first_order(positions: AgentMatrix) -> Result<Self> {
        Self::new(0.0, positions, None)
    }

    pub fn second_order(positions: AgentMatrix, velocities: AgentMatrix) -> Result<Self> {
        Self::new(0.0, positions, Some(velocities))
    }

    pub fn new(time: f64, positions: AgentMatrix, velocities: Option<AgentMatrix>) -> Result<Self> {
        if positions.nrows() < 2 {
            return Err(Error::Dimension(format!(
                "need at least 2 agents, got {}",
                positions.nrows()
            )));
        }
        if positions.ncols() < 1 {
            return Err(Error::Dimension("dimension must be at least 1".into()));
        }
        if !(time.is_finite() && time >= 0.0) {
            return Err(Error::InvalidArgument(format!("time must be finite and >= 0, got {time}")));
        }
        if positions.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { t: time, detail: "positions".into() });
        }
        if let Some(v) = &velocities {
            if v.shape() != positions.shape() {
                return Err(Error::Dimension(format!(
                    "velocities {:?} vs positions {:?}",
                    v.shape(),
                    positions.shape()
                )));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite { t: time, detail: "velocities".into() });
            }
        }
        Ok(Self { time, positions, velocities })
    }

    pub fn n_agents(&self) -> usize {
        self.positions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_second_order(&self) -> bool {
        self.velocities.is_some()
    }
}

/// Standard deviations `X = sqrt(B(x,x))` and `V = sqrt(B(v,v))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    pub x: f64,
    /// Zero for first-order runs.
    pub v: f64,
}

/// Arithmetic mean of the agent rows.
pub fn mean(x: &AgentMatrix) -> RowDVector<f64> {
    x.row_mean()
}

/// Subtracts the mean from every agent.
pub fn centered(x: &AgentMatrix) -> AgentMatrix {
    let m = x.row_mean();
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        row -= &m;
    }
    out
}

/// The variance bilinear form `B(x, y)`.
pub fn variance_form(x: &AgentMatrix, y: &AgentMatrix) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(variance_form_unchecked(x, y))
}

pub(crate) fn variance_form_unchecked(x: &AgentMatrix, y: &AgentMatrix) -> f64 {
    let n = x.nrows() as f64;
    centered(x).dot(&centered(y)) / n
}

pub fn std_dev(x: &AgentMatrix) -> f64 {
    variance_form_unchecked(x, x).max(0.0).sqrt()
}

/// Translates positions (and velocities) to zero mean.
pub fn center(state: &EnsembleState) -> EnsembleState {
    EnsembleState {
        time: state.time,
        positions: centered(&state.positions),
        velocities: state.velocities.as_ref().map(centered),
    }
}

pub fn std_devs(state: &EnsembleState) -> VarianceStats {
    VarianceStats {
        x: std_dev(&state.positions),
        v: state.velocities.as_ref().map_or(0.0, std_dev),
    }
}

/// True when every agent lies within `tol` of the mean.
pub fn is_consensus(x: &AgentMatrix, tol: f64) -> bool {
    let c = centered(x);
    c.row_iter().all(|r| r.norm() < tol)
}

/// Builds an `N x d` matrix from per-agent rows.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<AgentMatrix> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return Err(Error::Dimension("empty agent array".into()));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("ragged agent array".into()));
    }
    Ok(DMatrix::from_fn(n, d, |i, k| rows[i][k]))
}

pub fn to_rows(x: &AgentMatrix) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn pairwise_oracle(x: &AgentMatrix, y: &AgentMatrix) -> f64 {
        let n = x.nrows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dx = x.row(i) - x.row(j);
                let dy = y.row(i) - y.row(j);
                s += dx.dot(&dy);
            }
        }
        s / (2.0 * (n * n) as f64)
    }

    fn agents(n: usize, d: usize) -> impl Strategy<Value = AgentMatrix> {
        proptest::collection::vec(-10.0f64..10.0, n * d)
            .prop_map(move |v| DMatrix::from_row_slice(n, d, &v))
    }

    #[test]
    fn consensus_vector_has_zero_variance() {
        let x = dmatrix![1.5, -2.0; 1.5, -2.0; 1.5, -2.0];
        assert_eq!(variance_form(&x, &x).unwrap(), 0.0);
        assert_eq!(std_dev(&x), 0.0);
        assert!(is_consensus(&x, 1e-12));
    }

    #[test]
    fn two_agent_hand_value() {
        let x = dmatrix![1.0; -1.0];
        assert!((variance_form(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let st = std_devs(&EnsembleState::first_order(x).unwrap());
        assert!((st.x - 1.0).abs() < 1e-15);
        assert_eq!(st.v, 0.0);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let x = dmatrix![1.0; -1.0];
        let y = dmatrix![1.0; -1.0; 0.0];
        assert!(matches!(variance_form(&x, &y), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_examples() {
        let p = dmatrix![0.3, 4.0; 0.3, 4.0];
        assert_eq!(mean(&p), RowDVector::from_row_slice(&[0.3, 4.0]));
        let x = dmatrix![2.0; 4.0];
        assert_eq!(mean(&x)[0], 3.0);
        let c = centered(&dmatrix![1.0, 7.0; -3.0, 2.0; 11.0, 0.5]);
        assert!(mean(&c).norm() < 1e-14);
    }

    #[test]
    fn center_examples() {
        let st = EnsembleState::first_order(dmatrix![2.0; 4.0]).unwrap();
        let c = center(&st);
        assert_eq!(c.positions, dmatrix![-1.0; 1.0]);
        assert_eq!(center(&c), c);
    }

    #[test]
    fn aligned_velocities_have_zero_v() {
        let st = EnsembleState::second_order(
            dmatrix![0.0, 1.0; 2.0, 3.0],
            dmatrix![0.5, -0.5; 0.5, -0.5],
        )
        .unwrap();
        assert_eq!(std_devs(&st).v, 0.0);
    }

    #[test]
    fn state_validation() {
        assert!(EnsembleState::first_order(dmatrix![1.0]).is_err());
        assert!(EnsembleState::first_order(dmatrix![1.0; f64::NAN]).is_err());
        assert!(EnsembleState::second_order(dmatrix![1.0; 2.0], dmatrix![1.0, 2.0; 3.0, 4.0]).is_err());
    }

    proptest! {
        #[test]
        fn matches_pairwise_sum(x in agents(5, 3), y in agents(5, 3)) {
            let b = variance_form(&x, &y).unwrap();
            let o = pairwise_oracle(&x, &y);
            prop_assert!((b - o).abs() <= 1e-12 * o.abs().max(1.0));
        }

        #[test]
        fn symmetric_and_bilinear(x in agents(4, 2), y in agents(4, 2), z in agents(4, 2), a in -3.0f64..3.0) {
            let bxy = variance_form(&x, &y).unwrap();
            prop_assert!((bxy - variance_form(&y, &x).unwrap()).abs() <= 1e-12 * bxy.abs().max(1.0));
            let lhs = variance_form(&(&x * a + &z), &y).unwrap();
            let rhs = a * bxy + variance_form(&z, &y).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
        }

        #[test]
        fn cauchy_schwarz(x in agents(6, 2), y in agents(6, 2)) {
            let bxy = variance_form(&x, &y).unwrap();
            let bxx = variance_form(&x, &x).unwrap();
            let byy = variance_form(&y, &y).unwrap();
            prop_assert!(bxx >= 0.0);
            prop_assert!(bxy * bxy <= bxx * byy * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn centering_preserves_form(x in agents(5, 3), y in agents(5, 3)) {
            let b = variance_form(&x, &y).unwrap();
            let bc = variance_form(&centered(&x), &centered(&y)).unwrap();
            prop_assert!((b - bc).abs() <= 1e-14 * b.abs().max(1.0) * 10.0);
        }

        #[test]
        fn zero_variance_iff_consensus(p in proptest::collection::vec(-5.0f64..5.0, 2), spread in 0.0f64..1.0) {
            let mut x = DMatrix::from_fn(4, 2, |_, k| p[k]);
            if spread > 0.5 {
                x[(2, 1)] += spread;
            }
            let b = variance_form(&x, &x).unwrap();
            prop_assert_eq!(b <= 1e-24, is_consensus(&x, 1e-12));
        }
    }
}
