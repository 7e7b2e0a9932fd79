//! Communication weights and graph Laplacians.
//!
//! A [`Laplacian`] always stores the normalized matrix `M` with
//! `M_ij = -w_ij / N` off the diagonal and `M_ii = (1/N) sum_j w_ij`, so
//! that `(M y)_i = (1/N) sum_j w_ij (y_i - y_j)`. The unnormalized graph
//! Laplacian `D - A` is `N * M`; spectral queries take a [`Convention`] to
//! choose between the two.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::kernel::Kernel;
use crate::schedule::WeightSchedule;
use crate::state::variance_form_unchecked;
use crate::{AgentMatrix, Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-13;
/// Relative threshold under which a deflated eigenvalue counts as zero.
const ZERO_EIGEN_REL: f64 = 1e-12;

/// Symmetric matrix of communication rates in `[0, 1]` with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    /// Validates `m`. The diagonal is irrelevant to the dynamics and is reset
    /// to zero.
    pub fn new(mut m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 || m.ncols() != n {
            return Err(Error::InvalidWeights(format!("expected a square matrix, got {:?}", m.shape())));
        }
        for i in 0..n {
            m[(i, i)] = 0.0;
            for j in 0..n {
                let w = m[(i, j)];
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::InvalidWeights(format!("entry ({i},{j}) = {w} outside [0,1]")));
                }
                if (w - m[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidWeights(format!(
                        "asymmetric entries ({i},{j}) = {w}, ({j},{i}) = {}",
                        m[(j, i)]
                    )));
                }
            }
        }
        // remove sub-tolerance asymmetry
        let m = (&m + m.transpose()) * 0.5;
        Ok(Self(m))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    /// All pairs connected with weight one.
    pub fn complete(n: usize) -> Self {
        Self(DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }))
    }

    /// Undirected edges `(i, j, w)` with 0-based agent indices.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut m = DMatrix::zeros(n, n);
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidWeights(format!("edge ({i},{j}) out of range for N = {n}")));
            }
            if i == j {
                continue;
            }
            m[(i, j)] = w;
            m[(j, i)] = w;
        }
        Self::new(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidWeights("weight rows must form a square matrix".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn n_agents(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Positive-weight edges `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n_agents();
        (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j, self.0[(i, j)])))
            .filter(|&(_, _, w)| w > 0.0)
    }

    /// `(1 / 2N^2) sum_{i,j} w_ij |y_i - y_j|^2`, the pairwise form of `B(L y, y)`.
    pub fn dirichlet_energy(&self, y: &AgentMatrix) -> f64 {
        let n = self.n_agents();
        let mut s = 0.0;
        for (i, j, w) in self.edges() {
            s += 2.0 * w * (y.row(i) - y.row(j)).norm_squared();
        }
        s / (2.0 * (n * n) as f64)
    }

    /// Weighted combination `sum_k c_k W_k`; fails if the result leaves `[0, 1]`.
    pub fn combination<'a>(
        n: usize,
        terms: impl IntoIterator<Item = (f64, &'a WeightMatrix)>,
    ) -> Result<Self> {
        let mut m = DMatrix::zeros(n, n);
        for (c, w) in terms {
            if w.n_agents() != n {
                return Err(Error::Dimension(format!("weights for N = {} in a combination for N = {n}", w.n_agents())));
            }
            m += &w.0 * c;
        }
        // absorb rounding at the interval ends
        m.iter_mut().for_each(|v| {
            if *v > 1.0 && *v < 1.0 + 1e-12 {
                *v = 1.0;
            } else if *v < 0.0 && *v > -1e-15 {
                *v = 0.0;
            }
        });
        Self::new(m)
    }
}

/// Which matrix a spectral quantity refers to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// The operator of the dynamics, including its `1/N` prefactor.
    #[default]
    Normalized,
    /// The combinatorial Laplacian `D - A`, equal to `N` times the normalized one.
    Unnormalized,
}

impl Convention {
    fn factor(self, n: usize) -> f64 {
        match self {
            Convention::Normalized => 1.0,
            Convention::Unnormalized => n as f64,
        }
    }
}

impl std::fmt::Display for Convention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Convention::Normalized => "normalized",
            Convention::Unnormalized => "unnormalized",
        })
    }
}

/// Normalized graph Laplacian acting blockwise on `(R^d)^N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    m: DMatrix<f64>,
}

impl Laplacian {
    pub fn zero(n: usize) -> Self {
        Self { m: DMatrix::zeros(n, n) }
    }

    /// Laplacian of the raw communication weights.
    pub fn from_weights(w: &WeightMatrix) -> Self {
        Self::from_effective_weights(w.matrix())
    }

    /// Laplacian of the state-dependent weights `w_ij * phi(|x_i - x_j|)`.
    pub fn state_dependent(w: &WeightMatrix, positions: &AgentMatrix, kernel: &Kernel) -> Result<Self> {
        let n = w.n_agents();
        if positions.nrows() != n {
            return Err(Error::Dimension(format!("{} agents in state, {n} in weights", positions.nrows())));
        }
        Ok(Self::from_effective_weights(&effective_weights(w, positions, kernel)))
    }

    fn from_effective_weights(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let inv_n = 1.0 / n as f64;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut deg = 0.0;
            for j in 0..n {
                if i != j {
                    m[(i, j)] = -a[(i, j)] * inv_n;
                    deg += a[(i, j)];
                }
            }
            m[(i, i)] = deg * inv_n;
        }
        Self { m }
    }

    /// Wraps a normalized Laplacian matrix after checking symmetry, zero row
    /// sums and non-positive off-diagonal entries.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 || m.ncols() != n {
            return Err(Error::InvalidLaplacian(format!("expected a square matrix, got {:?}", m.shape())));
        }
        let scale = m.amax().max(1.0);
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidLaplacian(format!("not symmetric at ({i},{j})")));
                }
                if i != j && m[(i, j)] > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidLaplacian(format!("positive off-diagonal entry at ({i},{j})")));
                }
                row += m[(i, j)];
            }
            if row.abs() > ROW_SUM_TOL * scale * n as f64 {
                return Err(Error::InvalidLaplacian(format!("row {i} sums to {row}")));
            }
        }
        Ok(Self { m })
    }

    pub fn n_agents(&self) -> usize {
        self.m.nrows()
    }

    /// The normalized matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn matrix_in(&self, convention: Convention) -> DMatrix<f64> {
        &self.m * convention.factor(self.n_agents())
    }

    /// `L y`, applied to each coordinate column.
    pub fn apply(&self, y: &AgentMatrix) -> Result<AgentMatrix> {
        if y.nrows() != self.n_agents() {
            return Err(Error::Dimension(format!("{} agents vs operator on {}", y.nrows(), self.n_agents())));
        }
        Ok(&self.m * y)
    }

    /// `B(L y, y)`.
    pub fn quadratic_form(&self, y: &AgentMatrix) -> Result<f64> {
        let ly = self.apply(y)?;
        Ok(variance_form_unchecked(&ly, y))
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { m: &self.m * a }
    }

    /// Laplacian of the union graph, whose weights are the sums of both.
    pub fn union(&self, other: &Laplacian) -> Result<Self> {
        if self.n_agents() != other.n_agents() {
            return Err(Error::Dimension(format!("union of N = {} and N = {}", self.n_agents(), other.n_agents())));
        }
        Ok(Self { m: &self.m + &other.m })
    }

    /// Full spectrum, ascending.
    pub fn spectrum(&self, convention: Convention) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix_in(convention)).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Eigen-decomposition restricted to the mean-zero subspace, ascending.
    fn deflated_eigen(&self) -> (Vec<f64>, Vec<DVector<f64>>) {
        let n = self.n_agents();
        if n < 2 {
            return (vec![], vec![]);
        }
        let q = helmert_basis(n);
        let restricted = q.transpose() * &self.m * &q;
        let eig = SymmetricEigen::new(restricted);
        let mut idx: Vec<usize> = (0..n - 1).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = idx.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = idx.iter().map(|&k| &q * eig.eigenvectors.column(k)).collect();
        (values, vectors)
    }

    /// Second-smallest eigenvalue, i.e. the smallest one once the all-ones
    /// direction is removed. Zero for disconnected graphs.
    pub fn algebraic_connectivity(&self, convention: Convention) -> f64 {
        let (values, _) = self.deflated_eigen();
        let (Some(&min), Some(&max)) = (values.first(), values.last()) else {
            return 0.0;
        };
        let threshold = ZERO_EIGEN_REL * max.max(ZERO_EIGEN_REL);
        if min < threshold {
            0.0
        } else {
            min * convention.factor(self.n_agents())
        }
    }

    /// Normalized `lambda_2` together with a unit Fiedler vector.
    pub fn fiedler(&self) -> Option<(f64, DVector<f64>)> {
        let (values, vectors) = self.deflated_eigen();
        Some((*values.first()?, vectors.into_iter().next()?))
    }

    /// Operator norm with respect to `B`: the largest eigenvalue on the
    /// mean-zero subspace.
    pub fn b_operator_norm(&self) -> f64 {
        self.deflated_eigen().0.last().copied().unwrap_or(0.0).max(0.0)
    }
}

/// Orthonormal basis of the mean-zero subspace of `R^n` (Helmert contrasts),
/// as the columns of an `n x (n-1)` matrix.
pub(crate) fn helmert_basis(n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n - 1);
    for k in 1..n {
        let s = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            q[(i, k - 1)] = 1.0 / s;
        }
        q[(k, k - 1)] = -(k as f64) / s;
    }
    q
}

pub(crate) fn effective_weights(w: &WeightMatrix, positions: &AgentMatrix, kernel: &Kernel) -> DMatrix<f64> {
    let n = w.n_agents();
    let mut a = DMatrix::zeros(n, n);
    for (i, j, wij) in w.edges() {
        let r = (positions.row(i) - positions.row(j)).norm();
        let v = wij * kernel.eval_unchecked(r);
        a[(i, j)] = v;
        a[(j, i)] = v;
    }
    a
}

/// `(1/tau) * integral_t^{t+tau} L_xi(s) ds`, exact for piecewise-constant
/// schedules.
pub fn window_average_laplacian(schedule: &WeightSchedule, t: f64, tau: f64) -> Result<Laplacian> {
    Ok(Laplacian::from_weights(&schedule.window_average(t, tau)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::example_n4_schedule;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(rng: &mut ChaCha8Rng, n: usize, density: f64) -> WeightMatrix {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < density {
                    let w = rng.random_range(0.05..1.0);
                    m[(i, j)] = w;
                    m[(j, i)] = w;
                }
            }
        }
        WeightMatrix::new(m).unwrap()
    }

    fn random_agents(rng: &mut ChaCha8Rng, n: usize, d: usize) -> AgentMatrix {
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    fn connected_oracle(w: &WeightMatrix) -> bool {
        // union-find over positive edges
        let n = w.n_agents();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            if p[i] != i {
                let r = find(p, p[i]);
                p[i] = r;
            }
            p[i]
        }
        for (i, j, _) in w.edges() {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        (0..n).all(|i| find(&mut parent, i) == root)
    }

    fn power_iteration_oracle(l: &Laplacian, rng: &mut ChaCha8Rng) -> f64 {
        let n = l.n_agents();
        let mut v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let project = |v: &mut DVector<f64>| {
            let m = v.mean();
            v.add_scalar_mut(-m);
        };
        project(&mut v);
        let mut est = 0.0;
        for _ in 0..20_000 {
            let mut w = l.matrix() * &v;
            project(&mut w);
            let norm = w.norm();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm / v.norm();
            v = w / norm;
            if (next - est).abs() < 1e-15 * next.max(1.0) {
                return next;
            }
            est = next;
        }
        est
    }

    #[test]
    fn weight_validation() {
        assert!(WeightMatrix::new(dmatrix![0.0, 0.5; 0.4, 0.0]).is_err());
        assert!(WeightMatrix::new(dmatrix![0.0, 1.5; 1.5, 0.0]).is_err());
        assert!(WeightMatrix::new(dmatrix![0.0, -0.1; -0.1, 0.0]).is_err());
        let w = WeightMatrix::new(dmatrix![0.7, 0.5; 0.5, 0.2]).unwrap();
        assert_eq!(w.get(0, 0), 0.0);
        assert!(WeightMatrix::from_edges(3, &[(0, 3, 1.0)]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_operator() {
        let l = Laplacian::from_weights(&WeightMatrix::zeros(5));
        assert_eq!(l, Laplacian::zero(5));
        assert_eq!(l.algebraic_connectivity(Convention::Normalized), 0.0);
        assert_eq!(l.b_operator_norm(), 0.0);
    }

    #[test]
    fn two_agent_laplacian() {
        let w = WeightMatrix::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let l = Laplacian::from_weights(&w);
        assert_eq!(l.matrix(), &dmatrix![0.5, -0.5; -0.5, 0.5]);
        let y = dmatrix![1.0; -1.0];
        assert_eq!(l.apply(&y).unwrap(), dmatrix![1.0; -1.0]);
        assert!((l.b_operator_norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn complete_graph_is_identity_minus_averaging() {
        for n in [2, 3, 7] {
            let l = Laplacian::from_weights(&WeightMatrix::complete(n));
            let expect = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
            assert!((l.matrix() - &expect).amax() < 1e-15);
            assert!((l.algebraic_connectivity(Convention::Normalized) - 1.0).abs() < 1e-12);
            let sp = l.spectrum(Convention::Normalized);
            assert!(sp[0].abs() < 1e-12);
            assert!(sp[1..].iter().all(|e| (e - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn state_laplacian_examples() {
        let w = WeightMatrix::complete(3);
        let x = dmatrix![0.0; 1.0; 3.0];
        // constant kernel reduces to the raw Laplacian, scaled by its value
        let one = Kernel::constant(1.0).unwrap();
        assert_eq!(Laplacian::state_dependent(&w, &x, &one).unwrap(), Laplacian::from_weights(&w));
        let same = dmatrix![2.0; 2.0; 2.0];
        let pl = Kernel::power_law(1.0, 1.0, 0.25).unwrap();
        let l = Laplacian::state_dependent(&w, &same, &pl).unwrap();
        assert!((l.matrix() - Laplacian::from_weights(&w).matrix() * pl.eval(0.0).unwrap()).amax() < 1e-15);
        // phi(r) = 1/(1+r), tabulated
        let inv = Kernel::tabulated(
            (0..=300).map(|k| k as f64 * 0.01).collect(),
            (0..=300).map(|k| 1.0 / (1.0 + k as f64 * 0.01)).collect(),
        )
        .unwrap();
        let a = effective_weights(&w, &x, &inv);
        assert!((a[(0, 1)] - 0.5).abs() < 1e-12);
        assert!((a[(1, 2)] - 1.0 / 3.0).abs() < 1e-4);
        assert!((a[(0, 2)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn apply_has_zero_mean_and_kills_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let w = random_weights(&mut rng, 6, 0.6);
            let l = Laplacian::from_weights(&w);
            let y = random_agents(&mut rng, 6, 3);
            let ly = l.apply(&y).unwrap();
            assert!(ly.row_mean().norm() < 1e-13);
            let c = DMatrix::from_fn(6, 3, |_, k| k as f64 - 0.7);
            assert!(l.apply(&c).unwrap().amax() < 1e-14);
        }
    }

    #[test]
    fn quadratic_form_matches_pairwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kernel = Kernel::power_law(1.0, 1.0, 0.3).unwrap();
        for _ in 0..200 {
            let w = random_weights(&mut rng, 6, 0.7);
            let y = random_agents(&mut rng, 6, 2);
            let q = Laplacian::from_weights(&w).quadratic_form(&y).unwrap();
            let o = w.dirichlet_energy(&y);
            assert!(q >= -1e-15);
            assert!((q - o).abs() <= 1e-12 * o.max(1e-300), "{q} vs {o}");
            // state-dependent version against the effective-weight pairwise sum
            let x = random_agents(&mut rng, 6, 2);
            let ls = Laplacian::state_dependent(&w, &x, &kernel).unwrap();
            let mut oracle = 0.0;
            for i in 0..6 {
                for j in 0..6 {
                    let r = (x.row(i) - x.row(j)).norm();
                    oracle += w.get(i, j) * kernel.eval(r).unwrap() * (y.row(i) - y.row(j)).norm_squared();
                }
            }
            oracle /= 72.0;
            let qs = ls.quadratic_form(&y).unwrap();
            assert!((qs - oracle).abs() <= 1e-12 * oracle.max(1e-300));
        }
        let y = DMatrix::from_element(6, 2, 3.0);
        assert_eq!(Laplacian::from_weights(&WeightMatrix::complete(6)).quadratic_form(&y).unwrap(), 0.0);
    }

    #[test]
    fn averaged_example_spectrum() {
        let w = WeightMatrix::from_edges(4, &[(0, 3, 1.0 / 6.0), (2, 3, 1.0 / 6.0), (1, 2, 1.0 / 6.0), (1, 3, 1.0 / 6.0)]).unwrap();
        let l = Laplacian::from_weights(&w);
        let sp = l.spectrum(Convention::Unnormalized);
        for (got, want) in sp.iter().zip([0.0, 1.0 / 6.0, 0.5, 2.0 / 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((l.algebraic_connectivity(Convention::Unnormalized) - 1.0 / 6.0).abs() < 1e-12);
        assert!((l.algebraic_connectivity(Convention::Normalized) - 1.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn two_components_have_zero_connectivity() {
        let w = WeightMatrix::from_edges(6, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (3, 4, 1.0), (4, 5, 1.0), (3, 5, 1.0)]).unwrap();
        assert_eq!(Laplacian::from_weights(&w).algebraic_connectivity(Convention::Unnormalized), 0.0);
    }

    #[test]
    fn union_of_slot_graphs_is_the_averaged_graph() {
        let a = Laplacian::from_weights(&WeightMatrix::from_edges(4, &[(0, 1, 1.0)]).unwrap());
        let b = Laplacian::from_weights(&WeightMatrix::from_edges(4, &[(2, 3, 1.0)]).unwrap());
        let both = Laplacian::from_weights(&WeightMatrix::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap());
        assert!((a.union(&b).unwrap().matrix() - both.matrix()).amax() <= 1e-15);
        assert_eq!(a.union(&Laplacian::zero(4)).unwrap(), a);
        assert!(a.union(&Laplacian::zero(3)).is_err());

        let s = example_n4_schedule(1.0).unwrap();
        let slots = [3.0 / 12.0, 7.0 / 12.0, 11.0 / 12.0];
        let mut sum = Laplacian::zero(4);
        for t in slots {
            sum = sum.union(&Laplacian::from_weights(&s.sample(t).unwrap()).scaled(1.0 / 6.0)).unwrap();
        }
        let fig = Laplacian::from_weights(
            &WeightMatrix::from_edges(4, &[(0, 3, 1.0 / 6.0), (2, 3, 1.0 / 6.0), (1, 2, 1.0 / 6.0), (1, 3, 1.0 / 6.0)]).unwrap(),
        );
        assert!((sum.matrix() - fig.matrix()).amax() < 1e-15);
    }

    #[test]
    fn from_matrix_validation() {
        assert!(Laplacian::from_matrix(dmatrix![1.0, -1.0; -0.5, 0.5]).is_err());
        assert!(Laplacian::from_matrix(dmatrix![1.0, -0.5; -0.5, 1.0]).is_err());
        assert!(Laplacian::from_matrix(dmatrix![-1.0, 1.0; 1.0, -1.0]).is_err());
        assert!(Laplacian::from_matrix(dmatrix![0.5, -0.5; -0.5, 0.5]).is_ok());
    }

    #[test]
    fn connectivity_matches_union_find() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..1000 {
            let n = 3 + k % 8;
            let w = random_weights(&mut rng, n, 0.25);
            let lambda2 = Laplacian::from_weights(&w).algebraic_connectivity(Convention::Normalized);
            assert_eq!(lambda2 > 0.0, connected_oracle(&w), "graph {k}");
        }
    }

    #[test]
    fn fiedler_vector_attains_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let w = random_weights(&mut rng, 7, 0.5);
            let l = Laplacian::from_weights(&w);
            let mu = l.algebraic_connectivity(Convention::Normalized);
            for _ in 0..10 {
                let v = crate::state::centered(&random_agents(&mut rng, 7, 2));
                let b = crate::state::variance_form(&v, &v).unwrap();
                assert!(l.quadratic_form(&v).unwrap() >= mu * b - 1e-10);
            }
            let (lam, f) = l.fiedler().unwrap();
            let fv = AgentMatrix::from_column_slice(7, 1, f.as_slice());
            let b = crate::state::variance_form(&fv, &fv).unwrap();
            if mu > 0.0 {
                assert!((l.quadratic_form(&fv).unwrap() - mu * b).abs() < 1e-10);
                assert!((lam - mu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adding_an_edge_never_decreases_connectivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let w = random_weights(&mut rng, 6, 0.4);
            let before = Laplacian::from_weights(&w).algebraic_connectivity(Convention::Normalized);
            let (i, j) = (rng.random_range(0..6), rng.random_range(0..6));
            let mut m = w.matrix().clone();
            if i != j {
                let add = rng.random_range(0.0..(1.0 - m[(i, j)]));
                m[(i, j)] += add;
                m[(j, i)] = m[(i, j)];
            }
            let after = Laplacian::from_weights(&WeightMatrix::new(m).unwrap()).algebraic_connectivity(Convention::Normalized);
            assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn b_norm_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let w = random_weights(&mut rng, 8, 0.6);
            let l = Laplacian::from_weights(&w);
            let oracle = power_iteration_oracle(&l, &mut rng);
            assert!((l.b_operator_norm() - oracle).abs() < 1e-10, "{} vs {oracle}", l.b_operator_norm());
        }
    }

    #[test]
    fn state_laplacian_dominates_scaled_raw_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kernel = Kernel::power_law(2.0, 1.0, 0.4).unwrap();
        for _ in 0..100 {
            let w = random_weights(&mut rng, 5, 0.7);
            let x = random_agents(&mut rng, 5, 2);
            let mut c0 = f64::INFINITY;
            for i in 0..5 {
                for j in 0..5 {
                    c0 = c0.min(kernel.eval((x.row(i) - x.row(j)).norm()).unwrap());
                }
            }
            let ls = Laplacian::state_dependent(&w, &x, &kernel).unwrap();
            let lx = Laplacian::from_weights(&w);
            for _ in 0..5 {
                let y = random_agents(&mut rng, 5, 2);
                assert!(ls.quadratic_form(&y).unwrap() >= c0 * lx.quadratic_form(&y).unwrap() - 1e-13);
            }
        }
    }
}
