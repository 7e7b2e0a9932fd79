//! Interaction kernels `phi`, the strong-interaction lower bound
//! `phi(r) >= K / (sigma + r)^beta`, and the rescaled kernel used by the
//! flocking estimates together with its primitive and inverse.

use serde::{Deserialize, Serialize};

use crate::quad;
use crate::{Error, Result};

/// Absolute tolerance of kernel quadratures.
pub const QUADRATURE_TOL: f64 = 1e-10;
/// Relative tolerance on the argument when inverting a primitive by bisection.
pub const BISECTION_TOL: f64 = 1e-12;

/// Serialized form of a kernel, e.g. `{"kind":"power_law","K":1.0,"sigma":1.0,"beta":0.25}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Constant {
        value: f64,
    },
    PowerLaw {
        #[serde(rename = "K")]
        k: f64,
        sigma: f64,
        beta: f64,
    },
    /// Linear interpolation on `r` (starting at 0), constant beyond the last node.
    Tabulated {
        r: Vec<f64>,
        values: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lipschitz: Option<f64>,
    },
}

/// A validated positive, non-increasing interaction kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelSpec", into = "KernelSpec")]
pub struct Kernel(KernelSpec);

impl TryFrom<KernelSpec> for Kernel {
    type Error = Error;

    fn try_from(spec: KernelSpec) -> Result<Self> {
        match &spec {
            KernelSpec::Constant { value } => {
                if !(value.is_finite() && *value > 0.0) {
                    return Err(Error::InvalidKernel(format!("constant value must be positive, got {value}")));
                }
            }
            KernelSpec::PowerLaw { k, sigma, beta } => {
                if !(k.is_finite() && *k > 0.0 && sigma.is_finite() && *sigma > 0.0) {
                    return Err(Error::InvalidKernel(format!("need K > 0 and sigma > 0, got K = {k}, sigma = {sigma}")));
                }
                if !(*beta > 0.0 && *beta < 1.0) {
                    return Err(Error::InvalidKernel(format!("power-law exponent must lie in (0, 1), got {beta}")));
                }
            }
            KernelSpec::Tabulated { r, values, lipschitz } => {
                if r.len() < 2 || r.len() != values.len() {
                    return Err(Error::InvalidKernel("table needs at least two (r, value) pairs of equal length".into()));
                }
                if r[0] != 0.0 {
                    return Err(Error::InvalidKernel("table must start at r = 0".into()));
                }
                if r.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidKernel("table radii must be strictly increasing".into()));
                }
                if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidKernel("table values must be positive".into()));
                }
                if values.windows(2).any(|w| w[1] > w[0]) {
                    return Err(Error::InvalidKernel("table values must be non-increasing".into()));
                }
                if let Some(lip) = lipschitz {
                    for (rw, vw) in r.windows(2).zip(values.windows(2)) {
                        let slope = (vw[0] - vw[1]) / (rw[1] - rw[0]);
                        if slope > lip * (1.0 + 1e-12) {
                            return Err(Error::InvalidKernel(format!(
                                "slope {slope} on [{}, {}] exceeds declared Lipschitz bound {lip}",
                                rw[0], rw[1]
                            )));
                        }
                    }
                }
            }
        }
        Ok(Kernel(spec))
    }
}

impl From<Kernel> for KernelSpec {
    fn from(k: Kernel) -> Self {
        k.0
    }
}

impl Kernel {
    pub fn constant(value: f64) -> Result<Self> {
        KernelSpec::Constant { value }.try_into()
    }

    pub fn power_law(k: f64, sigma: f64, beta: f64) -> Result<Self> {
        KernelSpec::PowerLaw { k, sigma, beta }.try_into()
    }

    pub fn tabulated(r: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        KernelSpec::Tabulated { r, values, lipschitz: None }.try_into()
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.0
    }

    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::InvalidArgument(format!("kernel evaluated at negative radius {r}")));
        }
        Ok(self.eval_unchecked(r))
    }

    pub(crate) fn eval_unchecked(&self, r: f64) -> f64 {
        match &self.0 {
            KernelSpec::Constant { value } => *value,
            KernelSpec::PowerLaw { k, sigma, beta } => k * (sigma + r).powf(-beta),
            KernelSpec::Tabulated { r: grid, values, .. } => {
                let last = grid.len() - 1;
                if r >= grid[last] {
                    return values[last];
                }
                let hi = grid.partition_point(|&g| g <= r).max(1);
                let lo = hi - 1;
                let s = (r - grid[lo]) / (grid[hi] - grid[lo]);
                values[lo] + s * (values[hi] - values[lo])
            }
        }
    }

    /// Supremum of the kernel, attained at `r = 0`.
    pub fn max_value(&self) -> f64 {
        self.eval_unchecked(0.0)
    }

    /// `integral_a^b phi(r) dr` for `0 <= a, b`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match &self.0 {
            KernelSpec::Constant { value } => value * (b - a),
            KernelSpec::PowerLaw { k, sigma, beta } => {
                let e = 1.0 - beta;
                k / e * ((sigma + b).powf(e) - (sigma + a).powf(e))
            }
            KernelSpec::Tabulated { r: grid, .. } => {
                let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
                // split at the interpolation nodes so each piece is smooth
                let mut cuts = vec![lo];
                cuts.extend(grid.iter().copied().filter(|&g| g > lo && g < hi));
                cuts.push(hi);
                let f = |r: f64| self.eval_unchecked(r);
                let tol = QUADRATURE_TOL / cuts.len() as f64;
                sign * cuts.windows(2).map(|w| quad::integrate(&f, w[0], w[1], tol)).sum::<f64>()
            }
        }
    }

    /// The power-law triple this kernel realizes with equality, if any.
    pub fn floor_constants(&self) -> Option<KernelFloor> {
        match self.0 {
            KernelSpec::PowerLaw { k, sigma, beta } => Some(KernelFloor { k, sigma, beta }),
            _ => None,
        }
    }
}

/// Constants of a strong-interaction lower bound `phi(r) >= K / (sigma + r)^beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelFloor {
    #[serde(rename = "K")]
    pub k: f64,
    pub sigma: f64,
    pub beta: f64,
}

impl KernelFloor {
    pub fn lower_bound(&self, r: f64) -> f64 {
        self.k * (self.sigma + r).powf(-self.beta)
    }

    pub fn beta_admissible(&self) -> bool {
        self.beta > 0.0 && self.beta < 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFloorReport {
    pub holds: bool,
    pub beta_admissible: bool,
    pub grid_points: usize,
    /// First grid radius where `phi` drops below the bound, with both values.
    pub first_violation: Option<(f64, f64, f64)>,
}

/// Checks `beta in (0, 1/2)` and `phi(r) >= K/(sigma + r)^beta` on a uniform
/// grid of `n_grid` points over `[0, r_max]`.
pub fn check_kernel_floor(kernel: &Kernel, hyp: KernelFloor, r_max: f64, n_grid: usize) -> Result<KernelFloorReport> {
    if !(r_max > 0.0) || n_grid < 2 {
        return Err(Error::InvalidArgument(format!("need r_max > 0 and n_grid >= 2, got {r_max}, {n_grid}")));
    }
    let beta_admissible = hyp.beta_admissible() && hyp.k > 0.0 && hyp.sigma > 0.0;
    let first_violation = (0..n_grid)
        .map(|i| r_max * i as f64 / (n_grid - 1) as f64)
        .map(|r| (r, kernel.eval_unchecked(r), hyp.lower_bound(r)))
        // relative slack so a kernel checked against its own constants passes
        .find(|&(_, phi, bound)| phi < bound * (1.0 - 1e-14));
    Ok(KernelFloorReport {
        holds: beta_admissible && first_violation.is_none(),
        beta_admissible,
        grid_points: n_grid,
        first_violation,
    })
}

/// The kernel `r -> phi(2 sqrt(N) (r + tau V(0)))` and its primitive anchored
/// at `X(0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledKernel {
    base: Kernel,
    n_agents: usize,
    tau: f64,
    v0: f64,
    x0: f64,
}

impl RescaledKernel {
    pub fn new(base: Kernel, n_agents: usize, tau: f64, v0: f64, x0: f64) -> Result<Self> {
        if n_agents < 1 || !(tau > 0.0) || !(v0 >= 0.0) || !(x0 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rescaled kernel needs N >= 1, tau > 0, V(0) >= 0, X(0) >= 0; got {n_agents}, {tau}, {v0}, {x0}"
            )));
        }
        Ok(Self { base, n_agents, tau, v0, x0 })
    }

    pub fn base(&self) -> &Kernel {
        &self.base
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    /// `2 sqrt(N)`.
    pub(crate) fn scale(&self) -> f64 {
        2.0 * (self.n_agents as f64).sqrt()
    }

    /// Maps a deviation `r` to the pair distance fed to the base kernel.
    pub(crate) fn base_radius(&self, r: f64) -> f64 {
        self.scale() * (r + self.tau * self.v0)
    }

    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::InvalidArgument(format!("rescaled kernel evaluated at {r}")));
        }
        Ok(self.base.eval_unchecked(self.base_radius(r)))
    }

    /// `integral_{X(0)}^{X} phi_tau(r) dr`.
    pub fn primitive(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::InvalidArgument(format!("primitive evaluated at {x}")));
        }
        Ok(self.base.integral(self.base_radius(self.x0), self.base_radius(x)) / self.scale())
    }

    /// The unique `X >= X(0)` with `primitive(X) = y`.
    pub fn inverse_primitive(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) || !y.is_finite() {
            return Err(Error::InvalidArgument(format!("inverse primitive needs finite y >= 0, got {y}")));
        }
        if y == 0.0 {
            return Ok(self.x0);
        }
        let a = self.scale();
        match *self.base.spec() {
            KernelSpec::Constant { value } => Ok(self.x0 + y / value),
            KernelSpec::PowerLaw { k, sigma, beta } => {
                let e = 1.0 - beta;
                let g0 = (sigma + self.base_radius(self.x0)).powf(e);
                let g = y * a * e / k + g0;
                Ok((g.powf(1.0 / e) - sigma) / a - self.tau * self.v0)
            }
            KernelSpec::Tabulated { .. } => invert_increasing(|x| self.primitive(x).unwrap_or(f64::NAN), y, self.x0),
        }
    }

    /// Position-spread radius
    /// `Phi_tau^{-1}( 2 sqrt((1+c^2) tau) (alpha_1 + beta_1 eps0) V(0) / (mu eps0) )`.
    pub fn critical_radius(&self, eps0: f64, c: f64, mu: f64, alpha1: f64, beta1: f64) -> Result<f64> {
        if !(eps0 > 0.0) || !(mu > 0.0 && mu <= 1.0) || !(c >= 0.0) {
            return Err(Error::InvalidArgument(format!("critical radius needs eps0 > 0, mu in (0,1], c >= 0; got {eps0}, {mu}, {c}")));
        }
        let s = ((1.0 + c * c) * self.tau).sqrt();
        self.inverse_primitive(2.0 * s * (alpha1 + beta1 * eps0) / (mu * eps0) * self.v0)
    }
}

/// Solves `f(x) = y` for increasing `f` with `f(lo) <= y`, by doubling to
/// bracket and then bisecting.
pub(crate) fn invert_increasing<F: Fn(f64) -> f64>(f: F, y: f64, lo: f64) -> Result<f64> {
    let mut a = lo;
    let mut width = 1.0f64.max(lo.abs());
    let mut b = lo + width;
    let mut guard = 0;
    while f(b) < y {
        a = b;
        width *= 2.0;
        b = lo + width;
        guard += 1;
        if guard > 1100 || !b.is_finite() {
            return Err(Error::InvalidArgument(format!("could not bracket a preimage of {y}")));
        }
    }
    while b - a > BISECTION_TOL * b.abs().max(1.0) {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if f(m) < y {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}
