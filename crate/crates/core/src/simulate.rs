//! Explicit-Euler trajectories with optional noise, random subsampling, and
//! occupation histograms used as reference densities.

use log::{debug, info};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Point3, SystemSpec};
use crate::error::{Error, Result};
use crate::fvm::Grid3;
use crate::stationary::DensityField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    None,
    /// Noise on the right-hand side of the ODE.
    Intrinsic,
    /// Noise on the observed states only.
    Extrinsic,
}

/// How intrinsic noise enters an Euler step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntrinsicScaling {
    /// Euler–Maruyama: `x += v dt + σ √dt ξ`.
    #[default]
    Sde,
    /// `x += v dt + σ ξ` on every step.
    AdditivePerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation per component.
    pub sigma: f64,
    pub seed: u64,
    pub scaling: IntrinsicScaling,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            sigma: 0.0,
            seed: 0,
            scaling: IntrinsicScaling::Sde,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn intrinsic(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Intrinsic,
            sigma,
            seed,
            ..Self::default()
        }
    }

    pub fn extrinsic(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Extrinsic,
            sigma,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma {} must be >= 0", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t0: f64,
    pub t_end: f64,
    /// Integrated states, `states[i]` at time `t0 + i·dt`.
    pub states: Vec<Point3>,
    /// Noisy observations of `states` under extrinsic noise.
    pub observations: Option<Vec<Point3>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// What an observer sees: the noisy observations if present, otherwise
    /// the states.
    pub fn samples(&self) -> &[Point3] {
        self.observations.as_deref().unwrap_or(&self.states)
    }

    /// [`Trajectory::samples`] without the leading `fraction` of entries.
    pub fn after_burn_in(&self, fraction: f64) -> Result<&[Point3]> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!("burn-in fraction {fraction} must lie in [0, 1)")));
        }
        let s = self.samples();
        let skip = (fraction * s.len() as f64).floor() as usize;
        Ok(&s[skip.min(s.len().saturating_sub(1))..])
    }
}

/// Number of states for a run of length `t` at step `dt`, the initial state
/// included. The small slack absorbs round-off in `t/dt`.
pub fn step_count(dt: f64, t: f64) -> usize {
    (t / dt + 1e-9).floor() as usize + 1
}

/// Explicit-Euler integration from `x0` over `[0, t_end]`.
pub fn integrate(
    spec: &SystemSpec,
    theta: &[f64],
    x0: Point3,
    dt: f64,
    t_end: f64,
    noise: &NoiseSpec,
) -> Result<Trajectory> {
    if !(dt > 0.0 && dt.is_finite()) || !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::invalid("dt and T must be positive"));
    }
    noise.validate()?;
    spec.velocity(theta, x0)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial state is not finite"));
    }
    let n = step_count(dt, t_end);
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let kick = match (noise.kind, noise.scaling) {
        (NoiseKind::Intrinsic, IntrinsicScaling::Sde) => noise.sigma * dt.sqrt(),
        (NoiseKind::Intrinsic, IntrinsicScaling::AdditivePerStep) => noise.sigma,
        _ => 0.0,
    };
    let mut states = Vec::with_capacity(n);
    let mut x = x0;
    states.push(x);
    for step in 1..n {
        let v = spec.velocity_unchecked(theta, x);
        for d in 0..3 {
            x[d] += dt * v[d];
        }
        if kick > 0.0 {
            for xd in x.iter_mut() {
                let xi: f64 = StandardNormal.sample(&mut rng);
                *xd += kick * xi;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step });
        }
        states.push(x);
    }
    let observations = (noise.kind == NoiseKind::Extrinsic && noise.sigma > 0.0).then(|| {
        states
            .iter()
            .map(|s| {
                let mut o = *s;
                for od in o.iter_mut() {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    *od += noise.sigma * xi;
                }
                o
            })
            .collect()
    });
    debug!("integrated {n} Euler steps of size {dt}");
    Ok(Trajectory {
        dt,
        t0: 0.0,
        t_end,
        states,
        observations,
    })
}

/// `n` samples drawn uniformly without replacement.
pub fn subsample(points: &[Point3], n: usize, seed: u64) -> Result<Vec<Point3>> {
    if n > points.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n} samples from {} states",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, points.len(), n).into_iter().map(|i| points[i]).collect())
}

/// Normalised occupation histogram plus bookkeeping about dropped points.
#[derive(Debug, Clone)]
pub struct Occupation {
    pub density: DensityField,
    pub inside: usize,
    pub outside: usize,
}

/// Bin `points` into the cells of `grid`. Points outside the grid are
/// dropped and counted.
pub fn occupation_histogram(points: &[Point3], grid: &Grid3) -> Result<Occupation> {
    let n = grid.len();
    const CHUNK: usize = 1 << 16;
    let (counts, outside) = points
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut counts = vec![0u64; n];
            let mut outside = 0usize;
            for p in chunk {
                match grid.locate(*p) {
                    Some(i) => counts[i] += 1,
                    None => outside += 1,
                }
            }
            (counts, outside)
        })
        .reduce(
            || (vec![0u64; n], 0),
            |(mut a, oa), (b, ob)| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                (a, oa + ob)
            },
        );
    let inside = points.len() - outside;
    if inside == 0 {
        return Err(Error::EmptyHistogram { outside });
    }
    if outside > 0 {
        info!("histogram dropped {outside} of {} points outside the grid", points.len());
    }
    let weights = counts.iter().map(|&c| c as f64).collect();
    Ok(Occupation {
        density: DensityField::from_weights(grid.clone(), weights)?,
        inside,
        outside,
    })
}
