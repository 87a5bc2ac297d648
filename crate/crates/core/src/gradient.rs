//! Loss `f(θ) = T_c(ρ_ε(θ), ρ*)` and its gradient.
//!
//! With `A = (1−ε)(I + cK) − I` factorised once per θ:
//!
//! * sensitivity path: `ζ_k = A⁻¹ y_k` with `y_k = −∂_k M_ε ρ`, then
//!   `∂_k f = φ·ζ_k` (one solve per parameter);
//! * adjoint path: `Aᵀλ = −φ + (φ·ρ)1`, then `∂_k f = λ·(∂_k M_ε ρ)` (one
//!   transpose solve in total).
//!
//! `φ` is a Kantorovich potential on the model side; only its values up to an
//! additive constant matter because every `ζ_k` has zero sum.

use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::dynamics::SystemSpec;
use crate::error::{Error, Result, Stage, StageExt};
use crate::fvm::{assemble_dk, assemble_for, cfl_constant_for_all, teleport, Grid3, MarkovOperator};
use crate::ot::{sinkhorn, sinkhorn_fixed, sinkhorn_warm, CostSpec, DualPotentials, TransportResult};
use crate::stationary::{solve_stationary_direct_cached, DensityField, ShiftedLu, StationarySolution, SymbolicCache};

/// Bound on relative linear-solve residuals accepted by the gradient paths.
pub const SOLVE_RESIDUAL_BOUND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    Ift,
    Adjoint,
    FiniteDiff,
}

/// Which number is reported as the loss value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossValue {
    /// Transport cost of the entropic plan.
    Plan,
    /// Dual objective of the rounded potentials.
    Dual,
    /// Entropic dual objective.
    Entropic,
    /// Debiased entropic cost `E(μ, ν) − ½E(μ, μ) − ½E(ν, ν)`; vanishes only
    /// at `μ = ν`, so an exact reference is recovered at its minimum.
    Divergence,
}

/// Which potential enters the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientPotential {
    /// The c-concave rounded `φ`.
    Rounded,
    /// The raw entropic `f`.
    Entropic,
}

/// Settings of the forward model `θ ↦ ρ_ε(θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardConfig {
    pub epsilon: f64,
    pub cfl_safety: f64,
    /// Width of the logistic Heaviside in `∂K`; 0 selects the exact step.
    pub k_smooth: f64,
    /// Fixed time scale `c`; when unset it is derived from the CFL bound.
    pub time_scale: Option<f64>,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            epsilon: 1e-6,
            cfl_safety: 0.9,
            k_smooth: 0.0,
            time_scale: None,
        }
    }
}

impl ForwardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid(format!("epsilon {} must lie in (0, 1)", self.epsilon)));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::invalid("cfl_safety must lie in (0, 1]"));
        }
        if !(self.k_smooth >= 0.0) {
            return Err(Error::invalid("k_smooth must be >= 0"));
        }
        if let Some(c) = self.time_scale {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("time_scale must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientConfig {
    pub method: GradientMethod,
    pub loss: LossValue,
    pub potential: GradientPotential,
    /// When set, every transport solve runs exactly this many Sinkhorn
    /// iterations per η stage from zero potentials (no warm start), making
    /// the loss a fixed smooth function of θ.
    pub frozen_budget: Option<usize>,
    /// Warm-start Sinkhorn from the previous evaluation's potentials.
    pub warm_start: bool,
    /// Relative step of the finite-difference oracle.
    pub fd_step: f64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        GradientConfig {
            method: GradientMethod::Adjoint,
            loss: LossValue::Divergence,
            potential: GradientPotential::Entropic,
            frozen_budget: None,
            warm_start: true,
            fd_step: 1e-4,
        }
    }
}

/// `θ ↦ ρ_ε(θ)` on a fixed grid with a fixed time scale `c`.
#[derive(Debug)]
pub struct ForwardModel {
    spec: SystemSpec,
    grid: Grid3,
    epsilon: f64,
    k_smooth: f64,
    c: f64,
    cache: SymbolicCache,
}

impl ForwardModel {
    /// `c` is taken from `cfg.time_scale` when given, otherwise it is the CFL
    /// constant valid simultaneously for every parameter vector in
    /// `cfl_thetas`.
    pub fn new(spec: SystemSpec, grid: Grid3, cfg: &ForwardConfig, cfl_thetas: &[Vec<f64>]) -> Result<Self> {
        cfg.validate()?;
        let c = match cfg.time_scale {
            Some(c) => c,
            None => {
                if cfl_thetas.is_empty() {
                    return Err(Error::invalid("need at least one parameter vector to derive the CFL constant"));
                }
                cfl_constant_for_all(&spec, cfl_thetas, &grid, cfg.cfl_safety)
                    .stage(Stage::Assembly)?
                    .unwrap_or(1.0)
            }
        };
        Ok(ForwardModel {
            spec,
            grid,
            epsilon: cfg.epsilon,
            k_smooth: cfg.k_smooth,
            c,
            cache: SymbolicCache::new(),
        })
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn time_scale(&self) -> f64 {
        self.c
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn markov(&self, theta: &[f64]) -> Result<MarkovOperator> {
        let k = assemble_for(&self.spec, theta, &self.grid).stage(Stage::Assembly)?;
        teleport(k, self.c, self.epsilon).stage(Stage::Assembly)
    }

    pub fn stationary(&self, theta: &[f64]) -> Result<(MarkovOperator, StationarySolution)> {
        let m = self.markov(theta)?;
        let sol = solve_stationary_direct_cached(&m, &self.cache).stage(Stage::Stationary)?;
        Ok((m, sol))
    }
}

/// Everything computed at one θ that the gradient needs.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub theta: Vec<f64>,
    pub f: f64,
    pub markov: MarkovOperator,
    pub stationary: StationarySolution,
    pub transport: TransportResult,
    /// Mean-zero potential fed to the gradient.
    pub phi: Vec<f64>,
    /// Constant removed from the potential to make it mean-zero.
    pub gauge_shift: f64,
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub f_value: f64,
    pub grad: Vec<f64>,
    pub method: GradientMethod,
    /// Relative residuals of the linear solves (one per ζ_k, or one for λ).
    pub residuals: Vec<f64>,
    /// Constant removed from the potential; gradients do not depend on it.
    pub gauge_shift: f64,
}

/// `f(θ) = T_c(ρ_ε(θ), ρ*)` with its gradient machinery.
#[derive(Debug)]
pub struct InverseProblem {
    forward: ForwardModel,
    rho_star: DensityField,
    cost: CostSpec,
    cfg: GradientConfig,
    warm: Mutex<Option<DualPotentials>>,
    warm_self: Mutex<Option<DualPotentials>>,
    target_self: OnceLock<f64>,
}

impl InverseProblem {
    pub fn new(forward: ForwardModel, rho_star: DensityField, cost: CostSpec, cfg: GradientConfig) -> Result<Self> {
        if rho_star.grid() != forward.grid() {
            return Err(Error::GridMismatch);
        }
        cost.validate()?;
        if !(cfg.fd_step > 0.0) {
            return Err(Error::invalid("fd_step must be positive"));
        }
        if cfg.frozen_budget == Some(0) {
            return Err(Error::invalid("frozen_budget must be positive"));
        }
        Ok(InverseProblem {
            forward,
            rho_star,
            cost,
            cfg,
            warm: Mutex::new(None),
            warm_self: Mutex::new(None),
            target_self: OnceLock::new(),
        })
    }

    pub fn forward(&self) -> &ForwardModel {
        &self.forward
    }

    pub fn rho_star(&self) -> &DensityField {
        &self.rho_star
    }

    pub fn config(&self) -> &GradientConfig {
        &self.cfg
    }

    pub fn cost_spec(&self) -> &CostSpec {
        &self.cost
    }

    pub fn arity(&self) -> usize {
        self.forward.spec.arity()
    }

    fn transport(
        &self,
        mu: &DensityField,
        nu: &DensityField,
        slot: &Mutex<Option<DualPotentials>>,
    ) -> Result<TransportResult> {
        if let Some(budget) = self.cfg.frozen_budget {
            return sinkhorn_fixed(mu, nu, &self.cost, budget);
        }
        let warm = if self.cfg.warm_start {
            slot.lock().unwrap_or_else(|e| e.into_inner()).clone()
        } else {
            None
        };
        let result = match &warm {
            Some(w) => match sinkhorn_warm(mu, nu, &self.cost, w) {
                Ok(r) => r,
                // A poor warm start can exhaust the budget; retry from scratch.
                Err(Error::NotConverged { .. }) => sinkhorn(mu, nu, &self.cost)?,
                Err(e) => return Err(e),
            },
            None => sinkhorn(mu, nu, &self.cost)?,
        };
        if self.cfg.warm_start {
            *slot.lock().unwrap_or_else(|e| e.into_inner()) = Some(result.raw.clone());
        }
        Ok(result)
    }

    /// `½E(ρ*, ρ*)`, computed once.
    fn target_self_term(&self) -> Result<f64> {
        if let Some(v) = self.target_self.get() {
            return Ok(*v);
        }
        let t = match self.cfg.frozen_budget {
            Some(budget) => sinkhorn_fixed(&self.rho_star, &self.rho_star, &self.cost, budget)?,
            None => sinkhorn(&self.rho_star, &self.rho_star, &self.cost)?,
        };
        Ok(*self.target_self.get_or_init(|| 0.5 * t.entropic_cost))
    }

    /// Forget the potentials kept for warm starts, so that the next
    /// evaluation depends on θ alone.
    pub fn reset_warm_start(&self) {
        *self.warm.lock().unwrap_or_else(|e| e.into_inner()) = None;
        *self.warm_self.lock().unwrap_or_else(|e| e.into_inner()) = None;
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        let (markov, stationary) = self.forward.stationary(theta)?;
        let rho = &stationary.density;
        let transport = self.transport(rho, &self.rho_star, &self.warm).stage(Stage::Transport)?;
        let (f, mut phi) = match self.cfg.loss {
            LossValue::Divergence => {
                let own = self.transport(rho, rho, &self.warm_self).stage(Stage::Transport)?;
                let target = self.target_self_term().stage(Stage::Transport)?;
                let f = transport.entropic_cost - 0.5 * own.entropic_cost - target;
                // E(μ, μ) depends on μ through both arguments.
                let phi: Vec<f64> = match self.cfg.potential {
                    GradientPotential::Rounded => transport
                        .potentials
                        .phi
                        .iter()
                        .zip(own.potentials.phi.iter().zip(&own.potentials.psi))
                        .map(|(a, (p, q))| a - 0.5 * (p + q))
                        .collect(),
                    GradientPotential::Entropic => transport
                        .raw
                        .phi
                        .iter()
                        .zip(own.raw.phi.iter().zip(&own.raw.psi))
                        .map(|(a, (p, q))| a - 0.5 * (p + q))
                        .collect(),
                };
                (f, phi)
            }
            loss => {
                let f = match loss {
                    LossValue::Plan => transport.cost,
                    LossValue::Dual => transport.dual_cost,
                    _ => transport.entropic_cost,
                };
                let phi = match self.cfg.potential {
                    GradientPotential::Rounded => transport.potentials.phi.clone(),
                    GradientPotential::Entropic => transport.raw.phi.clone(),
                };
                (f, phi)
            }
        };
        let gauge = phi.iter().sum::<f64>() / phi.len() as f64;
        phi.iter_mut().for_each(|v| *v -= gauge);
        Ok(Evaluation {
            theta: theta.to_vec(),
            f,
            markov,
            stationary,
            transport,
            phi,
            gauge_shift: gauge,
        })
    }

    pub fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta)?.f)
    }

    /// `∂_k M_ε ρ` for every parameter.
    pub fn dm_rho(&self, eval: &Evaluation) -> Result<Vec<Vec<f64>>> {
        let dk = assemble_dk(&self.forward.spec, &eval.theta, &self.forward.grid, self.forward.k_smooth)
            .stage(Stage::Sensitivity)?;
        let rho = eval.stationary.density.mass();
        Ok(dk.iter().map(|d| eval.markov.derivative_apply(d, rho)).collect())
    }

    /// Analytic gradient at an existing evaluation.
    pub fn gradient(&self, eval: &Evaluation, method: GradientMethod) -> Result<GradientReport> {
        let gauge_shift = eval.gauge_shift;
        let (grad, residuals) = match method {
            GradientMethod::Ift => {
                let dm = self.dm_rho(eval)?;
                let mut grad = Vec::with_capacity(dm.len());
                let mut res = Vec::with_capacity(dm.len());
                for w in &dm {
                    let y: Vec<f64> = w.iter().map(|v| -v).collect();
                    let (zeta, r) = solve_ift_sensitivity(&eval.markov, &eval.stationary, &y)
                        .stage(Stage::Sensitivity)?;
                    grad.push(dot(&eval.phi, &zeta));
                    res.push(r);
                }
                (grad, res)
            }
            GradientMethod::Adjoint => {
                let (lambda, r) = solve_adjoint(&eval.markov, &eval.stationary, &eval.phi).stage(Stage::Adjoint)?;
                let dm = self.dm_rho(eval)?;
                (dm.iter().map(|w| dot(&lambda, w)).collect(), vec![r])
            }
            GradientMethod::FiniteDiff => (self.finite_difference_grad(&eval.theta)?, Vec::new()),
        };
        Ok(GradientReport {
            f_value: eval.f,
            grad,
            method,
            residuals,
            gauge_shift,
        })
    }

    pub fn loss_and_grad(&self, theta: &[f64]) -> Result<GradientReport> {
        let eval = self.evaluate(theta)?;
        self.gradient(&eval, self.cfg.method)
    }

    /// Central differences of the loss, step `fd_step·|θ_k|` (or `fd_step`
    /// when `θ_k = 0`). Uses whatever transport settings the problem has; for
    /// a clean check configure `frozen_budget`.
    pub fn finite_difference_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut grad = Vec::with_capacity(theta.len());
        for k in 0..theta.len() {
            let h = if theta[k] == 0.0 {
                self.cfg.fd_step
            } else {
                self.cfg.fd_step * theta[k].abs()
            };
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[k] += h;
            tm[k] -= h;
            grad.push((self.loss(&tp)? - self.loss(&tm)?) / (2.0 * h));
        }
        Ok(grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `ζ` with `(M_ε − I)ζ = y`, `1ᵀζ = 0`, using the stationary factorisation.
/// Returns `ζ` and the relative residual `‖(M_ε − I)ζ − y‖∞ / max(1, ‖y‖∞)`.
pub fn solve_ift_sensitivity(
    m: &MarkovOperator,
    stationary: &StationarySolution,
    y: &[f64],
) -> Result<(Vec<f64>, f64)> {
    solve_sensitivity_with(m, &stationary.factor, stationary.density.mass(), y)
}

fn solve_sensitivity_with(m: &MarkovOperator, factor: &ShiftedLu, rho: &[f64], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let scale = y.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    let sum_y: f64 = y.iter().sum();
    if sum_y.abs() > 1e-12 * scale {
        return Err(Error::Contract(format!(
            "sensitivity right-hand side sums to {sum_y:e}; the parameter derivative of K does not conserve mass"
        )));
    }
    let mut zeta = factor.solve(y);
    let sum_z: f64 = zeta.iter().sum();
    let zscale = zeta.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    if sum_z.abs() > 1e-6 * zscale {
        return Err(Error::Residual {
            what: "sensitivity mass",
            value: sum_z.abs() / zscale,
            bound: 1e-6,
        });
    }
    // Remove the round-off component along the kernel direction ρ.
    for (z, r) in zeta.iter_mut().zip(rho) {
        *z -= sum_z * r;
    }
    let mz = m.matvec(&zeta);
    let res: Vec<f64> = mz.iter().zip(&zeta).zip(y).map(|((a, z), b)| a - z - b).collect();
    let rel = norm_inf(&res) / norm_inf(y).max(1.0);
    if !(rel < SOLVE_RESIDUAL_BOUND) {
        return Err(Error::Residual {
            what: "sensitivity residual",
            value: rel,
            bound: SOLVE_RESIDUAL_BOUND,
        });
    }
    Ok((zeta, rel))
}

/// `λ` with `(M_ε − I)ᵀλ = −φ + (φ·ρ)1`, normalised to `1ᵀλ = 0`.
/// Returns `λ` and the relative residual.
pub fn solve_adjoint(m: &MarkovOperator, stationary: &StationarySolution, phi: &[f64]) -> Result<(Vec<f64>, f64)> {
    let rho = stationary.density.mass();
    let phi_rho = dot(phi, rho);
    let rhs: Vec<f64> = phi.iter().map(|p| -p + phi_rho).collect();
    let mut lambda = stationary.factor.solve_transpose(&rhs);
    let mean = lambda.iter().sum::<f64>() / lambda.len() as f64;
    lambda.iter_mut().for_each(|l| *l -= mean);
    let mt = m.matvec_transpose(&lambda);
    let res: Vec<f64> = mt.iter().zip(&lambda).zip(&rhs).map(|((a, l), b)| a - l - b).collect();
    let rel = norm_inf(&res) / norm_inf(&rhs).max(1.0);
    if !(rel < SOLVE_RESIDUAL_BOUND) {
        return Err(Error::Residual {
            what: "adjoint residual",
            value: rel,
            bound: SOLVE_RESIDUAL_BOUND,
        });
    }
    Ok((lambda, rel))
}

/// One-shot loss and gradient at `theta`, with the time scale derived from
/// the CFL bound at `theta` unless fixed in `forward`.
pub fn loss_and_grad(
    spec: &SystemSpec,
    theta: &[f64],
    rho_star: &DensityField,
    forward: &ForwardConfig,
    cost: &CostSpec,
    cfg: &GradientConfig,
) -> Result<GradientReport> {
    let model = ForwardModel::new(spec.clone(), rho_star.grid().clone(), forward, &[theta.to_vec()])?;
    let problem = InverseProblem::new(model, rho_star.clone(), cost.clone(), cfg.clone())?;
    problem.loss_and_grad(theta)
}
