//! Stationary densities of the teleported transfer operator.
//!
//! The fixed point `M_ε ρ = ρ, 1ᵀρ = 1` is found either directly, by a sparse
//! LU factorisation of `A = (1−ε)(I + cK) − I` with the rank-one part moved to
//! the right-hand side (`Aρ = −(ε/n)·1`), or by power iteration from the
//! uniform density.

use std::sync::{Arc, Mutex};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::Mat;

use crate::error::{Error, Result};
use crate::fvm::{teleport, CscMatrix, Grid3, MarkovOperator, UpwindOperator};
use crate::ot::{sinkhorn, CostSpec};

/// Nonnegative cell masses summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid3,
    mass: Vec<f64>,
}

impl DensityField {
    /// Validates length, nonnegativity and unit total (to 1e-10).
    pub fn new(grid: Grid3, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.len() {
            return Err(Error::invalid(format!(
                "density has {} entries but the grid has {} cells",
                mass.len(),
                grid.len()
            )));
        }
        if let Some(bad) = mass.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(Error::invalid(format!("density entry {bad} is not a nonnegative number")));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("density sums to {total}, not 1")));
        }
        Ok(DensityField { grid, mass })
    }

    /// Rescale nonnegative weights to unit mass.
    pub fn from_weights(grid: Grid3, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::invalid("weights must have a positive finite total"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(grid, weights)
    }

    pub fn uniform(grid: Grid3) -> Self {
        let n = grid.len();
        DensityField {
            grid,
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn delta(grid: Grid3, index: usize) -> Result<Self> {
        if index >= grid.len() {
            return Err(Error::invalid(format!("cell {index} is outside the grid")));
        }
        let mut mass = vec![0.0; grid.len()];
        mass[index] = 1.0;
        Ok(DensityField { grid, mass })
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn into_mass(self) -> Vec<f64> {
        self.mass
    }

    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(self.mass.iter().zip(&other.mass).map(|(a, b)| (a - b).abs()).sum())
    }

    /// Mass-weighted mean of cell centres.
    pub fn mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for (i, w) in self.mass.iter().enumerate() {
            let p = self.grid.cell_center(i);
            for d in 0..3 {
                m[d] += w * p[d];
            }
        }
        m
    }

    /// Per-axis variance of cell centres under the density.
    pub fn variance(&self) -> [f64; 3] {
        let mean = self.mean();
        let mut v = [0.0; 3];
        for (i, w) in self.mass.iter().enumerate() {
            let p = self.grid.cell_center(i);
            for d in 0..3 {
                v[d] += w * (p[d] - mean[d]).powi(2);
            }
        }
        v
    }
}

/// Sparse LU factors of `A = (1−ε)(I + cK) − I`, reusable for every solve
/// against the same operator (sensitivities, adjoints).
pub struct ShiftedLu {
    lu: Lu<usize, f64>,
    matrix: CscMatrix,
}

impl std::fmt::Debug for ShiftedLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShiftedLu")
            .field("dim", &self.matrix.dim())
            .field("nnz", &self.matrix.nnz())
            .finish()
    }
}

impl ShiftedLu {
    pub fn matrix(&self) -> &CscMatrix {
        &self.matrix
    }

    /// `A⁻¹ b`
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut b = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        (0..rhs.len()).map(|i| b[(i, 0)]).collect()
    }

    /// `A⁻ᵀ b`
    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let mut b = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.lu.solve_transpose_in_place(b.as_mut());
        (0..rhs.len()).map(|i| b[(i, 0)]).collect()
    }
}

/// Remembers the symbolic analysis of the last sparsity pattern factorised,
/// so repeated solves on one grid pay only for the numeric phase.
#[derive(Default)]
pub struct SymbolicCache {
    slot: Mutex<Option<(Vec<usize>, Vec<usize>, SymbolicLu<usize>)>>,
}

impl std::fmt::Debug for SymbolicCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymbolicCache").finish_non_exhaustive()
    }
}

impl SymbolicCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn factorize(&self, a: CscMatrix) -> Result<ShiftedLu> {
        let fa = a.to_faer()?;
        let symbolic = {
            let mut slot = self.slot.lock().unwrap_or_else(|e| e.into_inner());
            match &*slot {
                Some((cp, ri, sym)) if cp == a.col_ptr() && ri == a.row_idx() => sym.clone(),
                _ => {
                    let sym = SymbolicLu::try_new(fa.symbolic())
                        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
                    *slot = Some((a.col_ptr().to_vec(), a.row_idx().to_vec(), sym.clone()));
                    sym
                }
            }
        };
        let lu = Lu::try_new_with_symbolic(symbolic, fa.as_ref())
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(ShiftedLu { lu, matrix: a })
    }
}

/// Result of a direct stationary solve.
#[derive(Debug, Clone)]
pub struct StationarySolution {
    pub density: DensityField,
    /// `‖M_ε ρ − ρ‖∞`
    pub residual: f64,
    pub factor: Arc<ShiftedLu>,
}

pub const RESIDUAL_BOUND: f64 = 1e-10;

pub fn residual_inf(m: &MarkovOperator, rho: &[f64]) -> f64 {
    m.matvec(rho)
        .iter()
        .zip(rho)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn require_teleport(m: &MarkovOperator) -> Result<()> {
    if m.epsilon() <= 0.0 {
        return Err(Error::Precondition(
            "stationary solve needs epsilon > 0 for a unique fixed point".into(),
        ));
    }
    Ok(())
}

pub fn solve_stationary_direct(m: &MarkovOperator) -> Result<StationarySolution> {
    solve_stationary_direct_cached(m, &SymbolicCache::new())
}

pub fn solve_stationary_direct_cached(
    m: &MarkovOperator,
    cache: &SymbolicCache,
) -> Result<StationarySolution> {
    require_teleport(m)?;
    let n = m.dim();
    let factor = cache.factorize(m.shifted_matrix())?;
    let rhs = vec![-m.epsilon() / n as f64; n];
    let mut rho = factor.solve(&rhs);
    let total: f64 = rho.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Factorization(format!("solution has total mass {total}")));
    }
    rho.iter_mut().for_each(|r| *r /= total);
    let min = rho.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::Residual {
            what: "negative stationary mass",
            value: -min,
            bound: 0.0,
        });
    }
    let residual = residual_inf(m, &rho);
    if !(residual < RESIDUAL_BOUND) {
        return Err(Error::Residual {
            what: "stationary residual",
            value: residual,
            bound: RESIDUAL_BOUND,
        });
    }
    Ok(StationarySolution {
        density: DensityField {
            grid: m.base().grid.clone(),
            mass: rho,
        },
        residual,
        factor: Arc::new(factor),
    })
}

#[derive(Debug, Clone)]
pub struct PowerSolution {
    pub density: DensityField,
    pub iterations: usize,
    /// Last `‖ρ_{k+1} − ρ_k‖₁`.
    pub step: f64,
    pub residual: f64,
}

/// Power iteration from the uniform density.
pub fn solve_stationary_power(m: &MarkovOperator, tol: f64, max_iters: usize) -> Result<PowerSolution> {
    let n = m.dim();
    power_from(m, vec![1.0 / n as f64; n], tol, max_iters)
}

/// Power iteration from a given nonnegative start (normalised first).
pub fn power_from(
    m: &MarkovOperator,
    start: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<PowerSolution> {
    require_teleport(m)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("power-method tolerance must be positive"));
    }
    let grid = m.base().grid.clone();
    let mut rho = DensityField::from_weights(grid.clone(), start)?.into_mass();
    let mut step = f64::INFINITY;
    for it in 1..=max_iters {
        let next = m.matvec(&rho);
        step = next.iter().zip(&rho).map(|(a, b)| (a - b).abs()).sum();
        rho = next;
        if step < tol {
            let total: f64 = rho.iter().sum();
            rho.iter_mut().for_each(|r| *r /= total);
            let residual = residual_inf(m, &rho);
            return Ok(PowerSolution {
                density: DensityField { grid, mass: rho },
                iterations: it,
                step,
                residual,
            });
        }
    }
    Err(Error::NotConverged {
        solver: "power method",
        iterations: max_iters,
        residual: step,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub l1: f64,
    /// Transport cost to the reference, when a cost was requested.
    pub transport: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EpsilonSweep {
    pub rows: Vec<SweepRow>,
    pub reference_epsilon: Option<f64>,
    /// Least-squares slope of `log ℓ₁` against `log ε` over rows with
    /// positive misfit.
    pub slope: Option<f64>,
}

/// Stationary densities across a list of teleportation strengths, compared
/// against a reference density. Without a supplied reference, the reference
/// is solved at one tenth of the smallest `ε`.
pub fn epsilon_sweep(
    k: &UpwindOperator,
    c: f64,
    eps_list: &[f64],
    reference: Option<&DensityField>,
    cost: Option<&CostSpec>,
) -> Result<EpsilonSweep> {
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(Error::invalid("epsilon list must be nonempty with values in (0, 1)"));
    }
    let cache = SymbolicCache::new();
    let (reference, reference_epsilon) = match reference {
        Some(r) => (r.clone(), None),
        None => {
            let smallest = eps_list.iter().copied().fold(f64::INFINITY, f64::min);
            let eps_ref = smallest / 10.0;
            let m = teleport(k.clone(), c, eps_ref)?;
            (solve_stationary_direct_cached(&m, &cache)?.density, Some(eps_ref))
        }
    };
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let m = teleport(k.clone(), c, eps)?;
        let rho = solve_stationary_direct_cached(&m, &cache)?.density;
        let l1 = rho.l1_distance(&reference)?;
        let transport = match cost {
            Some(spec) => Some(sinkhorn(&rho, &reference, spec)?.cost),
            None => None,
        };
        rows.push(SweepRow {
            epsilon: eps,
            l1,
            transport,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.epsilon, r.l1))
        .collect();
    Ok(EpsilonSweep {
        rows,
        reference_epsilon,
        slope: loglog_slope(&pts),
    })
}

/// Least-squares slope of `ln y` against `ln x`. Points with a
/// non-positive coordinate are skipped.
pub fn loglog_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = pts
        .iter()
        .filter(|p| p.0 > 0.0 && p.1 > 0.0)
        .map(|p| (p.0.ln(), p.1.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Interval, SystemSpec};
    use crate::fvm::test_support::*;
    use crate::fvm::{assemble_for, cfl_constant, face_velocities};

    fn three_cell(eps: f64) -> MarkovOperator {
        let g = Grid3::line(0.0, 3.0, 3).unwrap();
        teleport(assemble_for(&constant_x_flow(), &[1.0], &g).unwrap(), 0.5, eps).unwrap()
    }

    fn lorenz(counts: [usize; 3], eps: f64) -> MarkovOperator {
        let spec = SystemSpec::lorenz();
        let g = Grid3::uniform(spec.domain(), counts).unwrap();
        let theta = [10.0, 28.0, 8.0 / 3.0];
        let faces = face_velocities(&spec, &theta, &g).unwrap();
        let c = cfl_constant(&faces, &g, 0.9).unwrap().unwrap();
        teleport(assemble_for(&spec, &theta, &g).unwrap(), c, eps).unwrap()
    }

    #[test]
    fn zero_flow_gives_uniform() {
        let g = Grid3::uniform(&[Interval { lo: 0.0, hi: 1.0 }; 3], [3, 2, 2]).unwrap();
        let m = teleport(assemble_for(&zero_flow(), &[0.0], &g).unwrap(), 1.0, 1e-3).unwrap();
        let sol = solve_stationary_direct(&m).unwrap();
        for r in sol.density.mass() {
            assert!((r - 1.0 / 12.0).abs() < 1e-14);
        }
        let p = solve_stationary_power(&m, 1e-14, 10).unwrap();
        assert_eq!(p.iterations, 1);
    }

    #[test]
    fn three_cell_closed_form() {
        // Fixed point of the 3-state chain: ρ₀ = t/(1+…) etc. solved by hand:
        // with a = 1−ε, t = ε/3, mass balance gives
        //   ρ₀ = t / (1 − a/2), ρ₁ = (a ρ₀/2 + t) / (1 − a/2), ρ₂ = 1 − ρ₀ − ρ₁.
        let eps = 1e-6;
        let a = 1.0 - eps;
        let t = eps / 3.0;
        let r0 = t / (1.0 - a / 2.0);
        let r1 = (a * r0 / 2.0 + t) / (1.0 - a / 2.0);
        let expect = [r0, r1, 1.0 - r0 - r1];
        let sol = solve_stationary_direct(&three_cell(eps)).unwrap();
        for (got, want) in sol.density.mass().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        assert!(sol.density.mass()[2] > 1.0 - 1e-5);
        assert!(sol.residual < 1e-14);
    }

    #[test]
    fn power_matches_direct_on_three_cells() {
        let m = three_cell(1e-6);
        let d = solve_stationary_direct(&m).unwrap();
        let p = solve_stationary_power(&m, 1e-12, 100_000).unwrap();
        assert!(d.density.l1_distance(&p.density).unwrap() < 1e-10);
    }

    #[test]
    fn epsilon_zero_is_a_precondition_error() {
        let m = three_cell(0.0);
        assert!(matches!(solve_stationary_direct(&m), Err(Error::Precondition(_))));
        assert!(matches!(solve_stationary_power(&m, 1e-9, 10), Err(Error::Precondition(_))));
    }

    #[test]
    fn power_reports_non_convergence() {
        let m = lorenz([6, 6, 6], 1e-6);
        match solve_stationary_power(&m, 1e-15, 3) {
            Err(Error::NotConverged { iterations, .. }) => assert_eq!(iterations, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lorenz_solution_is_positive_and_certified() {
        let m = lorenz([8, 8, 8], 1e-6);
        let sol = solve_stationary_direct(&m).unwrap();
        assert!(sol.density.mass().iter().all(|&r| r > 0.0));
        assert!(sol.residual < RESIDUAL_BOUND);
        let total: f64 = sol.density.mass().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cache_reuses_symbolic_analysis() {
        let cache = SymbolicCache::new();
        let a = solve_stationary_direct_cached(&lorenz([6, 6, 6], 1e-3), &cache).unwrap();
        let b = solve_stationary_direct_cached(&lorenz([6, 6, 6], 1e-4), &cache).unwrap();
        let fresh = solve_stationary_direct(&lorenz([6, 6, 6], 1e-4)).unwrap();
        assert!(b.density.l1_distance(&fresh.density).unwrap() < 1e-12);
        assert!(a.density.l1_distance(&b.density).unwrap() > 0.0);
    }

    #[test]
    fn factor_solves_both_sides() {
        let m = lorenz([4, 4, 4], 1e-2);
        let sol = solve_stationary_direct(&m).unwrap();
        let a = sol.factor.matrix().clone();
        let b: Vec<f64> = (0..m.dim()).map(|i| (i as f64).cos()).collect();
        let x = sol.factor.solve(&b);
        let y = sol.factor.solve_transpose(&b);
        let ax = a.matvec(&x);
        let aty = a.matvec_transpose(&y);
        for i in 0..m.dim() {
            assert!((ax[i] - b[i]).abs() < 1e-10);
            assert!((aty[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn sweep_against_itself_is_zero() {
        let m = lorenz([5, 5, 5], 1e-3);
        let reference = solve_stationary_direct(&m).unwrap().density;
        let sweep = epsilon_sweep(m.base(), m.c(), &[1e-3], Some(&reference), None).unwrap();
        assert!(sweep.rows[0].l1 < 1e-12);
        assert_eq!(sweep.slope, None);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = (1..6).map(|i| (i as f64, 3.0 * (i as f64).powi(2))).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&[(1.0, 0.0), (2.0, 1.0)]), None);
    }

    #[test]
    fn density_validation() {
        let g = Grid3::line(0.0, 1.0, 2).unwrap();
        assert!(DensityField::new(g.clone(), vec![0.5, 0.6]).is_err());
        assert!(DensityField::new(g.clone(), vec![1.5, -0.5]).is_err());
        assert!(DensityField::new(g.clone(), vec![1.0]).is_err());
        let d = DensityField::from_weights(g, vec![1.0, 3.0]).unwrap();
        assert_eq!(d.mass(), &[0.25, 0.75]);
    }
}
