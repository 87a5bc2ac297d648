use log::debug;

use super::lines::{log_convolve, log_sum_exp, map_lines, AxisKernel};
use super::{check_pair, dot, round_potentials, CostSpec, DualPotentials, DENSE_LIMIT};
use crate::error::{Error, Result};
use crate::fvm::Grid3;
use crate::stationary::DensityField;

/// Masses below this are floored before taking logarithms.
const MASS_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone)]
pub struct TransportResult {
    /// Transport cost `Σ c_ij π_ij` of the entropic plan, without the entropy
    /// term.
    pub cost: f64,
    /// Dual objective of `potentials`; a certified lower bound on the
    /// unregularised transport cost.
    pub dual_cost: f64,
    /// Entropic dual objective `Σ f μ + Σ g ν` (includes the `η·KL` term).
    pub entropic_cost: f64,
    /// Feasible c-concave pair obtained by c-transform rounding of the
    /// entropic potentials.
    pub potentials: DualPotentials,
    /// Entropic potentials as produced by the iterations; useful as a warm
    /// start.
    pub raw: DualPotentials,
    pub eta: f64,
    pub iterations: usize,
    /// ℓ₁ violation of the source marginal at the last check.
    pub marginal_violation: f64,
}

/// Applies `x ↦ log Σ_j exp(x_j − c_ij/η)` for one η.
enum Kernel {
    Separable {
        counts: [usize; 3],
        spacing: [f64; 3],
        eta: f64,
        axes: Vec<AxisKernel>,
    },
    Dense {
        scaled: Vec<Vec<f64>>,
        eta: f64,
    },
}

impl Kernel {
    fn new(grid: &Grid3, spec: &CostSpec, eta: f64) -> Result<Self> {
        if spec.is_separable() {
            let counts = grid.counts();
            let h = grid.spacing();
            let axes = (0..3).map(|d| AxisKernel::new(counts[d], h[d], eta)).collect();
            Ok(Kernel::Separable {
                counts,
                spacing: h,
                eta,
                axes,
            })
        } else {
            let n = grid.len();
            if n > DENSE_LIMIT {
                return Err(Error::invalid(format!(
                    "cost exponent p = {} needs a dense kernel; grid of {n} cells exceeds {DENSE_LIMIT}",
                    spec.p
                )));
            }
            let scaled = (0..n)
                .map(|i| (0..n).map(|j| spec.pair_cost(grid, i, j) / eta).collect())
                .collect();
            Ok(Kernel::Dense { scaled, eta })
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Kernel::Separable { counts, axes, .. } => {
                let mut w = x.to_vec();
                for (d, k) in axes.iter().enumerate() {
                    if counts[d] > 1 {
                        w = map_lines(*counts, d, &w, |i, o| log_convolve(i, o, k));
                    }
                }
                w
            }
            Kernel::Dense { scaled, .. } => scaled
                .iter()
                .map(|row| log_sum_exp(x.iter().zip(row).map(|(xj, cij)| xj - cij)))
                .collect(),
        }
    }

    /// `Σ_ij c_ij exp(a_i + b_j − c_ij/η)`, the transport cost of the plan
    /// with log-scalings `a`, `b`.
    fn plan_cost(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Kernel::Separable {
                counts,
                spacing,
                eta,
                axes,
            } => {
                let mut total = 0.0;
                for d in 0..3 {
                    if counts[d] < 2 {
                        continue;
                    }
                    let weighted = AxisKernel::cost_weighted(counts[d], spacing[d], *eta);
                    let mut w = b.to_vec();
                    for (e, k) in axes.iter().enumerate() {
                        if counts[e] > 1 {
                            let k = if e == d { &weighted } else { k };
                            w = map_lines(*counts, e, &w, |i, o| log_convolve(i, o, k));
                        }
                    }
                    total += a.iter().zip(&w).map(|(ai, wi)| (ai + wi).exp()).sum::<f64>();
                }
                total
            }
            Kernel::Dense { scaled, eta } => scaled
                .iter()
                .zip(a)
                .map(|(row, ai)| {
                    row.iter()
                        .zip(b)
                        .map(|(s, bj)| s * eta * (ai + bj - s).exp())
                        .sum::<f64>()
                })
                .sum(),
        }
    }
}

/// How long each η stage runs.
#[derive(Debug, Clone, Copy)]
enum Budget {
    /// Until the marginal violation drops below the stage tolerance.
    Adaptive,
    /// Exactly this many iterations per stage, no convergence test.
    Fixed(usize),
}

struct State {
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    violation: f64,
}

fn log_masses(m: &[f64]) -> Vec<f64> {
    m.iter().map(|v| v.max(MASS_FLOOR).ln()).collect()
}

/// One Sinkhorn stage at fixed `eta`, updating `state` in place.
///
/// In adaptive mode the updates are over-relaxed, `f ← (1−ω)f + ω f̃`, with
/// `ω = 2/(1 + √(1−κ))` estimated from the observed contraction `κ` of the
/// marginal violation; `ω` falls back to 1 whenever the violation stops
/// decreasing.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    kernel: &Kernel,
    eta: f64,
    log_mu: &[f64],
    log_nu: &[f64],
    mu: &[f64],
    state: &mut State,
    budget: Budget,
    tol: f64,
    max_total: usize,
) -> Result<()> {
    let mut history: Vec<f64> = Vec::new();
    let mut omega = 1.0;
    // The violation test below assumes g is fitted to f under the current μ
    // and η, which a warm start or a new stage does not guarantee.
    let h: Vec<f64> = log_mu.iter().zip(&state.f).map(|(l, f)| l + f / eta).collect();
    state.g = kernel.apply(&h).into_iter().map(|v| -eta * v).collect();
    loop {
        if let Budget::Fixed(n) = budget {
            if history.len() >= n {
                return Ok(());
            }
        }
        if state.iterations >= max_total {
            return Err(Error::NotConverged {
                solver: "sinkhorn",
                iterations: state.iterations,
                residual: state.violation,
            });
        }
        let h: Vec<f64> = log_nu.iter().zip(&state.g).map(|(l, g)| l + g / eta).collect();
        let f_new: Vec<f64> = kernel.apply(&h).into_iter().map(|v| -eta * v).collect();
        // Row marginal of the plan built from (f, g): μ_i·exp((f_i − f̃_i)/η).
        state.violation = mu
            .iter()
            .zip(state.f.iter().zip(&f_new))
            .map(|(m, (f, fn_))| m * (((f - fn_) / eta).min(700.0).exp() - 1.0).abs())
            .sum();
        relax(&mut state.f, &f_new, omega);
        let h: Vec<f64> = log_mu.iter().zip(&state.f).map(|(l, f)| l + f / eta).collect();
        let g_new: Vec<f64> = kernel.apply(&h).into_iter().map(|v| -eta * v).collect();
        relax(&mut state.g, &g_new, omega);
        state.iterations += 1;
        history.push(state.violation);
        if !state.violation.is_finite() {
            return Err(Error::NotConverged {
                solver: "sinkhorn",
                iterations: state.iterations,
                residual: state.violation,
            });
        }
        if matches!(budget, Budget::Adaptive) {
            if state.violation < tol {
                return Ok(());
            }
            let k = history.len();
            if k >= 20 && k % 10 == 0 {
                let kappa = (history[k - 1] / history[k - 11]).powf(0.1);
                omega = if kappa < 1.0 {
                    (2.0 / (1.0 + (1.0 - kappa).sqrt())).min(1.95)
                } else {
                    1.0
                };
            }
        }
    }
}

fn relax(x: &mut [f64], target: &[f64], omega: f64) {
    if omega == 1.0 {
        x.copy_from_slice(target);
    } else {
        for (xi, ti) in x.iter_mut().zip(target) {
            *xi = (1.0 - omega) * *xi + omega * ti;
        }
    }
}

fn solve(
    mu: &DensityField,
    nu: &DensityField,
    spec: &CostSpec,
    warm: Option<&DualPotentials>,
    budget: Budget,
) -> Result<TransportResult> {
    spec.validate()?;
    check_pair(mu, nu)?;
    let grid = mu.grid();
    let n = grid.len();
    let mut schedule = spec.eta_schedule(grid);
    let mut state = State {
        f: vec![0.0; n],
        g: vec![0.0; n],
        iterations: 0,
        violation: f64::INFINITY,
    };
    if let Some(w) = warm {
        if w.phi.len() != n || w.psi.len() != n {
            return Err(Error::GridMismatch);
        }
        state.f = w.phi.clone();
        state.g = w.psi.clone();
        schedule = vec![*schedule.last().expect("schedule is nonempty")];
    }
    let log_mu = log_masses(mu.mass());
    let log_nu = log_masses(nu.mass());
    let last = schedule.len() - 1;
    for (s, &eta) in schedule.iter().enumerate() {
        let kernel = Kernel::new(grid, spec, eta)?;
        let tol = if s == last {
            spec.tol
        } else {
            (10.0 * spec.tol).max(1e-4)
        };
        run_stage(
            &kernel,
            eta,
            &log_mu,
            &log_nu,
            mu.mass(),
            &mut state,
            budget,
            tol,
            spec.max_iters,
        )?;
        debug!(
            "sinkhorn stage eta={eta:.3e} iterations={} violation={:.2e}",
            state.iterations, state.violation
        );
    }
    let eta = schedule[last];
    let kernel = Kernel::new(grid, spec, eta)?;
    // Over-relaxation leaves g slightly off its fitted value; refit so the
    // column marginal is exact and ⟨f, μ⟩ + ⟨g, ν⟩ is the entropic dual value.
    let h: Vec<f64> = log_mu.iter().zip(&state.f).map(|(l, f)| l + f / eta).collect();
    state.g = kernel.apply(&h).into_iter().map(|v| -eta * v).collect();
    let a: Vec<f64> = log_mu.iter().zip(&state.f).map(|(l, f)| l + f / eta).collect();
    let b: Vec<f64> = log_nu.iter().zip(&state.g).map(|(l, g)| l + g / eta).collect();
    let cost = kernel.plan_cost(&a, &b);
    let raw = DualPotentials {
        phi: state.f,
        psi: state.g,
        cconcave: false,
    };
    let entropic_cost = dot(&raw.phi, mu.mass()) + dot(&raw.psi, nu.mass());
    let potentials = rounded_pair(&a, &b, eta, grid, spec.p, mu.mass(), nu.mass());
    let dual_cost = potentials.dual_value(mu.mass(), nu.mass());
    Ok(TransportResult {
        cost,
        dual_cost,
        entropic_cost,
        potentials,
        raw,
        eta,
        iterations: state.iterations,
        marginal_violation: state.violation,
    })
}

/// Round from each side and keep the pair with the larger dual value. The
/// potentials rounded are `η·a` and `η·b`, i.e. the entropic potentials with
/// respect to counting measure, which are closer to Kantorovich potentials
/// than the product-measure ones.
fn rounded_pair(
    a: &[f64],
    b: &[f64],
    eta: f64,
    grid: &Grid3,
    p: f64,
    mu: &[f64],
    nu: &[f64],
) -> DualPotentials {
    let from_source: Vec<f64> = a.iter().map(|v| eta * v).collect();
    let from_target: Vec<f64> = b.iter().map(|v| eta * v).collect();
    let first = round_potentials(&from_source, grid, p);
    let flipped = round_potentials(&from_target, grid, p);
    let second = DualPotentials {
        phi: flipped.psi,
        psi: flipped.phi,
        cconcave: true,
    };
    if second.dual_value(mu, nu) > first.dual_value(mu, nu) {
        second
    } else {
        first
    }
}

/// Entropic transport from `mu` to `nu` with the η-scaling schedule of
/// `spec`, run until the marginal violation drops below `spec.tol`.
pub fn sinkhorn(mu: &DensityField, nu: &DensityField, spec: &CostSpec) -> Result<TransportResult> {
    solve(mu, nu, spec, None, Budget::Adaptive)
}

/// As [`sinkhorn`], but starting at the final η from previously computed
/// potentials (typically `raw` of a nearby problem).
pub fn sinkhorn_warm(
    mu: &DensityField,
    nu: &DensityField,
    spec: &CostSpec,
    warm: &DualPotentials,
) -> Result<TransportResult> {
    solve(mu, nu, spec, Some(warm), Budget::Adaptive)
}

/// Fixed work: every η stage runs exactly `iters_per_stage` iterations from
/// zero potentials. The result is then a smooth function of the inputs,
/// which finite-difference checks rely on.
pub fn sinkhorn_fixed(
    mu: &DensityField,
    nu: &DensityField,
    spec: &CostSpec,
    iters_per_stage: usize,
) -> Result<TransportResult> {
    if iters_per_stage == 0 {
        return Err(Error::invalid("fixed Sinkhorn budget must be positive"));
    }
    let spec = CostSpec {
        max_iters: usize::MAX,
        ..spec.clone()
    };
    solve(mu, nu, &spec, None, Budget::Fixed(iters_per_stage))
}
