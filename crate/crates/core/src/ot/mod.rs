//! Optimal-transport costs and Kantorovich potentials between densities on a
//! common grid, with cost `c(x, y) = |x − y|^p` between cell centres.
//!
//! * [`sinkhorn`]: log-domain entropic solver with η-scaling. For `p = 2` the
//!   Gibbs kernel factorises per axis and is applied as 1-D log-convolutions.
//! * [`c_transform`] and [`round_potentials`]: exact c-transforms, separable
//!   for `p = 2`, used to turn approximate potentials into a feasible pair.
//! * [`transport_cost_exact_1d`]: quantile coupling on a line.
//! * [`brute_force_lp`]: transportation simplex, used as an oracle.

mod ctransform;
mod exact1d;
mod lines;
mod lp;
mod sinkhorn;

pub use ctransform::{c_transform, round_potentials};
pub use exact1d::{transport_cost_exact_1d, Exact1d};
pub use lp::{brute_force_lp, LpSolution, TransportPlan};
pub use sinkhorn::{sinkhorn, sinkhorn_fixed, sinkhorn_warm, TransportResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fvm::Grid3;
use crate::stationary::DensityField;

/// Largest grid handled by the dense (non-separable) kernel path.
pub const DENSE_LIMIT: usize = 4096;

/// Transport cost and entropic-solver settings. `eta_start` and `eta_floor`
/// are relative to `diam^p`, where `diam` is the grid diameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSpec {
    pub p: f64,
    pub eta_start: f64,
    pub eta_floor: f64,
    pub eta_decay: f64,
    /// ℓ₁ marginal violation at which the final stage stops.
    pub tol: f64,
    /// Iteration budget across all stages.
    pub max_iters: usize,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            p: 2.0,
            eta_start: 1e-1,
            eta_floor: 1e-3,
            eta_decay: 0.5,
            tol: 1e-6,
            max_iters: 100_000,
        }
    }
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::invalid(format!("cost exponent p = {} must be >= 1", self.p)));
        }
        if !(self.eta_floor > 0.0 && self.eta_start >= self.eta_floor) {
            return Err(Error::invalid("need 0 < eta_floor <= eta_start"));
        }
        if !(self.eta_decay > 0.0 && self.eta_decay < 1.0) {
            return Err(Error::invalid("eta_decay must lie in (0, 1)"));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::invalid("tol and max_iters must be positive"));
        }
        Ok(())
    }

    pub fn is_separable(&self) -> bool {
        self.p == 2.0
    }

    /// `diam^p` of the grid, the scale the relative η values refer to.
    pub fn scale(&self, grid: &Grid3) -> f64 {
        grid.diameter().powf(self.p)
    }

    /// Absolute η values of the schedule, largest first.
    pub fn eta_schedule(&self, grid: &Grid3) -> Vec<f64> {
        let s = self.scale(grid);
        let floor = self.eta_floor * s;
        let mut eta = self.eta_start * s;
        let mut out = Vec::new();
        while eta > floor * (1.0 + 1e-12) {
            out.push(eta);
            eta *= self.eta_decay;
        }
        out.push(floor);
        out
    }

    pub fn pair_cost(&self, grid: &Grid3, i: usize, j: usize) -> f64 {
        let a = grid.cell_center(i);
        let b = grid.cell_center(j);
        let d2: f64 = (0..3).map(|d| (a[d] - b[d]).powi(2)).sum();
        if self.p == 2.0 {
            d2
        } else {
            d2.sqrt().powf(self.p)
        }
    }
}

/// Dense `n × n` cost matrix between cell centres.
pub fn cost_matrix(grid: &Grid3, p: f64) -> Vec<Vec<f64>> {
    let spec = CostSpec {
        p,
        ..CostSpec::default()
    };
    (0..grid.len())
        .map(|i| (0..grid.len()).map(|j| spec.pair_cost(grid, i, j)).collect())
        .collect()
}

/// Kantorovich potential pair: `phi` on source cells, `psi` on target cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// Set once `(phi, psi) = (φ^{cc}, φ^c)` after c-transform rounding, which
    /// guarantees feasibility `phi_i + psi_j ≤ c_ij`.
    pub cconcave: bool,
}

impl DualPotentials {
    /// `Σ φ μ + Σ ψ ν`
    pub fn dual_value(&self, mu: &[f64], nu: &[f64]) -> f64 {
        dot(&self.phi, mu) + dot(&self.psi, nu)
    }

    /// `(φ + λ, ψ − λ)`, which leaves the dual value unchanged.
    pub fn shifted(&self, lambda: f64) -> Self {
        DualPotentials {
            phi: self.phi.iter().map(|v| v + lambda).collect(),
            psi: self.psi.iter().map(|v| v - lambda).collect(),
            cconcave: self.cconcave,
        }
    }

    /// `φ` minus its mean; the gradient only sees `φ` up to a constant.
    pub fn mean_zero_phi(&self) -> Vec<f64> {
        let mean = self.phi.iter().sum::<f64>() / self.phi.len() as f64;
        self.phi.iter().map(|v| v - mean).collect()
    }

    /// Largest `φ_i + ψ_j − c_ij` over the given pairs.
    pub fn max_violation(&self, spec: &CostSpec, grid: &Grid3, pairs: &[(usize, usize)]) -> f64 {
        pairs
            .iter()
            .map(|&(i, j)| self.phi[i] + self.psi[j] - spec.pair_cost(grid, i, j))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_pair(mu: &DensityField, nu: &DensityField) -> Result<()> {
    if mu.grid() != nu.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(())
}
