//! Parameterized velocity fields `v(x, θ)` and their parameter Jacobians.
//!
//! The four benchmark systems are built in; anything else is supplied as a
//! [`VelocityField`] implementation (a velocity/Jacobian callback pair).
//! Every system carries a default state-space box large enough to contain its
//! attractor with some margin, since the transfer operator imposes zero flux
//! on the box boundary.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("interval [{lo}, {hi}] must satisfy lo < hi")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Lorenz,
    Rossler,
    Chen,
    ArctanLorenz,
    Custom,
}

/// A user-supplied velocity field.
///
/// `param_jacobian_into` writes `∂v/∂θ_k` into `out[k]` for every parameter;
/// `out.len()` always equals [`VelocityField::arity`].
pub trait VelocityField: Send + Sync {
    fn arity(&self) -> usize;
    fn velocity(&self, theta: &[f64], x: Point3) -> Point3;
    fn param_jacobian_into(&self, theta: &[f64], x: Point3, out: &mut [[f64; 3]]);
}

/// Adapter turning a pair of closures into a [`VelocityField`].
pub struct FnField<V, J> {
    arity: usize,
    velocity: V,
    jacobian: J,
}

impl<V, J> FnField<V, J>
where
    V: Fn(&[f64], Point3) -> Point3 + Send + Sync,
    J: Fn(&[f64], Point3, &mut [[f64; 3]]) + Send + Sync,
{
    pub fn new(arity: usize, velocity: V, jacobian: J) -> Self {
        FnField {
            arity,
            velocity,
            jacobian,
        }
    }
}

impl<V, J> VelocityField for FnField<V, J>
where
    V: Fn(&[f64], Point3) -> Point3 + Send + Sync,
    J: Fn(&[f64], Point3, &mut [[f64; 3]]) + Send + Sync,
{
    fn arity(&self) -> usize {
        self.arity
    }

    fn velocity(&self, theta: &[f64], x: Point3) -> Point3 {
        (self.velocity)(theta, x)
    }

    fn param_jacobian_into(&self, theta: &[f64], x: Point3, out: &mut [[f64; 3]]) {
        (self.jacobian)(theta, x, out)
    }
}

/// Which dynamical system to evaluate, its parameter labels and state-space box.
#[derive(Clone)]
pub struct SystemSpec {
    kind: SystemKind,
    param_names: Vec<String>,
    domain: [Interval; 3],
    custom: Option<Arc<dyn VelocityField>>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("kind", &self.kind)
            .field("param_names", &self.param_names)
            .field("domain", &self.domain)
            .finish_non_exhaustive()
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

const fn iv(lo: f64, hi: f64) -> Interval {
    Interval { lo, hi }
}

// Domain boxes were sized from long DNS runs at the reference parameters,
// then padded by a few units on every side.
const LORENZ_DOMAIN: [Interval; 3] = [iv(-25.0, 25.0), iv(-30.0, 30.0), iv(-5.0, 55.0)];
const ROSSLER_DOMAIN: [Interval; 3] = [iv(-25.0, 30.0), iv(-30.0, 25.0), iv(-5.0, 50.0)];
const CHEN_DOMAIN: [Interval; 3] = [iv(-30.0, 30.0), iv(-35.0, 35.0), iv(-5.0, 55.0)];

impl SystemSpec {
    /// Lorenz system, θ = (σ, ρ, β).
    pub fn lorenz() -> Self {
        Self::builtin(SystemKind::Lorenz, &["sigma", "rho", "beta"], LORENZ_DOMAIN)
    }

    /// Rössler system, θ = (a, b, c).
    pub fn rossler() -> Self {
        Self::builtin(SystemKind::Rossler, &["a", "b", "c"], ROSSLER_DOMAIN)
    }

    /// Chen system, θ = (a, b, c).
    pub fn chen() -> Self {
        Self::builtin(SystemKind::Chen, &["a", "b", "c"], CHEN_DOMAIN)
    }

    /// Lorenz right-hand side squashed through `50·atan(·/50)`, θ = (σ, ρ, β).
    pub fn arctan_lorenz() -> Self {
        Self::builtin(SystemKind::ArctanLorenz, &["sigma", "rho", "beta"], LORENZ_DOMAIN)
    }

    pub fn from_kind(kind: SystemKind) -> Result<Self> {
        match kind {
            SystemKind::Lorenz => Ok(Self::lorenz()),
            SystemKind::Rossler => Ok(Self::rossler()),
            SystemKind::Chen => Ok(Self::chen()),
            SystemKind::ArctanLorenz => Ok(Self::arctan_lorenz()),
            SystemKind::Custom => Err(Error::invalid(
                "custom systems need a velocity field; use SystemSpec::custom",
            )),
        }
    }

    fn builtin(kind: SystemKind, labels: &[&str], domain: [Interval; 3]) -> Self {
        SystemSpec {
            kind,
            param_names: names(labels),
            domain,
            custom: None,
        }
    }

    pub fn custom(
        param_names: Vec<String>,
        domain: [Interval; 3],
        field: Arc<dyn VelocityField>,
    ) -> Result<Self> {
        if param_names.is_empty() {
            return Err(Error::invalid("a system needs at least one parameter"));
        }
        if field.arity() != param_names.len() {
            return Err(Error::ParameterArity {
                expected: param_names.len(),
                got: field.arity(),
            });
        }
        for d in &domain {
            Interval::new(d.lo, d.hi)?;
        }
        Ok(SystemSpec {
            kind: SystemKind::Custom,
            param_names,
            domain,
            custom: Some(field),
        })
    }

    pub fn with_domain(mut self, domain: [Interval; 3]) -> Result<Self> {
        for d in &domain {
            Interval::new(d.lo, d.hi)?;
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn arity(&self) -> usize {
        self.param_names.len()
    }

    pub fn domain(&self) -> &[Interval; 3] {
        &self.domain
    }

    /// Conventional parameter values for the built-in systems.
    pub fn reference_parameters(&self) -> Option<Vec<f64>> {
        match self.kind {
            SystemKind::Lorenz | SystemKind::ArctanLorenz => Some(vec![10.0, 28.0, 8.0 / 3.0]),
            SystemKind::Rossler => Some(vec![0.1, 0.1, 14.0]),
            SystemKind::Chen => Some(vec![40.0, 3.0, 28.0]),
            SystemKind::Custom => None,
        }
    }

    fn check_arity(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.arity() {
            return Err(Error::ParameterArity {
                expected: self.arity(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    pub fn velocity(&self, theta: &[f64], x: Point3) -> Result<Point3> {
        self.check_arity(theta)?;
        Ok(self.velocity_unchecked(theta, x))
    }

    /// Rows are `∂v/∂θ_k`, one per parameter.
    pub fn velocity_param_jacobian(&self, theta: &[f64], x: Point3) -> Result<Vec<[f64; 3]>> {
        self.check_arity(theta)?;
        let mut out = vec![[0.0; 3]; self.arity()];
        self.param_jacobian_unchecked(theta, x, &mut out);
        Ok(out)
    }

    pub(crate) fn velocity_unchecked(&self, theta: &[f64], x: Point3) -> Point3 {
        let [x, y, z] = x;
        match self.kind {
            SystemKind::Lorenz => {
                let (s, r, b) = (theta[0], theta[1], theta[2]);
                [s * (y - x), x * (r - z) - y, x * y - b * z]
            }
            SystemKind::Rossler => {
                let (a, b, c) = (theta[0], theta[1], theta[2]);
                [-y - z, x + a * y, b + z * (x - c)]
            }
            SystemKind::Chen => {
                let (a, b, c) = (theta[0], theta[1], theta[2]);
                [a * (y - x), (c - a) * x - x * z + c * y, x * y - b * z]
            }
            SystemKind::ArctanLorenz => {
                let (s, r, b) = (theta[0], theta[1], theta[2]);
                [
                    50.0 * (s * (y - x) / 50.0).atan(),
                    50.0 * (x * (r - z) / 50.0 - y / 50.0).atan(),
                    50.0 * ((x * y - b * z) / 50.0).atan(),
                ]
            }
            SystemKind::Custom => self
                .custom
                .as_ref()
                .expect("custom kind always carries a field")
                .velocity(theta, [x, y, z]),
        }
    }

    pub(crate) fn param_jacobian_unchecked(&self, theta: &[f64], x: Point3, out: &mut [[f64; 3]]) {
        let [x, y, z] = x;
        match self.kind {
            SystemKind::Lorenz => {
                out[0] = [y - x, 0.0, 0.0];
                out[1] = [0.0, x, 0.0];
                out[2] = [0.0, 0.0, -z];
            }
            SystemKind::Rossler => {
                out[0] = [0.0, y, 0.0];
                out[1] = [0.0, 0.0, 1.0];
                out[2] = [0.0, 0.0, -z];
            }
            SystemKind::Chen => {
                out[0] = [y - x, -x, 0.0];
                out[1] = [0.0, 0.0, -z];
                out[2] = [0.0, x + y, 0.0];
            }
            SystemKind::ArctanLorenz => {
                // d/du [50 atan(u/50)] = 1 / (1 + (u/50)^2)
                let (s, r, b) = (theta[0], theta[1], theta[2]);
                let damp = |u: f64| 1.0 / (1.0 + (u / 50.0) * (u / 50.0));
                let ux = s * (y - x);
                let uy = x * (r - z) - y;
                let uz = x * y - b * z;
                out[0] = [(y - x) * damp(ux), 0.0, 0.0];
                out[1] = [0.0, x * damp(uy), 0.0];
                out[2] = [0.0, 0.0, -z * damp(uz)];
            }
            SystemKind::Custom => self
                .custom
                .as_ref()
                .expect("custom kind always carries a field")
                .param_jacobian_into(theta, [x, y, z], out),
        }
    }
}

/// The inference unknowns θ with optional per-component box bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    bounds: Option<Vec<Interval>>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("parameter vector is empty"));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("parameter {k} is not finite")));
        }
        Ok(ParameterVector {
            values,
            bounds: None,
        })
    }

    pub fn with_bounds(values: Vec<f64>, bounds: Vec<Interval>) -> Result<Self> {
        let mut p = Self::new(values)?;
        if bounds.len() != p.values.len() {
            return Err(Error::ParameterArity {
                expected: p.values.len(),
                got: bounds.len(),
            });
        }
        for (k, (v, b)) in p.values.iter().zip(&bounds).enumerate() {
            Interval::new(b.lo, b.hi)?;
            if !b.contains(*v) {
                return Err(Error::invalid(format!(
                    "parameter {k} = {v} outside bounds [{}, {}]",
                    b.lo, b.hi
                )));
            }
        }
        p.bounds = Some(bounds);
        Ok(p)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bounds(&self) -> Option<&[Interval]> {
        self.bounds.as_deref()
    }

    /// Copy of `self` holding `values` projected onto the bounds.
    pub fn with_values_clamped(&self, values: &[f64]) -> ParameterVector {
        let values = match &self.bounds {
            Some(b) => values.iter().zip(b).map(|(v, b)| b.clamp(*v)).collect(),
            None => values.to_vec(),
        };
        ParameterVector {
            values,
            bounds: self.bounds.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz_origin_is_equilibrium() {
        let v = SystemSpec::lorenz()
            .velocity(&[10.0, 28.0, 8.0 / 3.0], [0.0; 3])
            .unwrap();
        assert_eq!(v, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn lorenz_substitution() {
        let v = SystemSpec::lorenz()
            .velocity(&[10.0, 28.0, 8.0 / 3.0], [1.0, 1.0, 1.0])
            .unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 26.0);
        assert!((v[2] - (1.0 - 8.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn chen_substitution() {
        let v = SystemSpec::chen()
            .velocity(&[40.0, 3.0, 28.0], [1.0, 1.0, 1.0])
            .unwrap();
        assert_eq!(v, [0.0, 15.0, -2.0]);
    }

    #[test]
    fn lorenz_jacobian_rows() {
        let j = SystemSpec::lorenz()
            .velocity_param_jacobian(&[10.0, 28.0, 8.0 / 3.0], [1.0, 2.0, 3.0])
            .unwrap();
        assert_eq!(j[0], [1.0, 0.0, 0.0]);
        assert_eq!(j[2], [0.0, 0.0, -3.0]);
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let err = SystemSpec::rossler().velocity(&[0.1, 0.1], [0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::ParameterArity { expected: 3, got: 2 }));
        assert!(SystemSpec::chen()
            .velocity_param_jacobian(&[1.0; 4], [0.0; 3])
            .is_err());
    }

    #[test]
    fn custom_field_arity_is_checked() {
        let field = Arc::new(FnField::new(2, |_: &[f64], _| [0.0; 3], |_: &[f64], _, _: &mut [[f64; 3]]| {}));
        let err = SystemSpec::custom(names(&["a"]), LORENZ_DOMAIN, field).unwrap_err();
        assert!(matches!(err, Error::ParameterArity { .. }));
    }

    #[test]
    fn parameter_bounds_are_enforced() {
        let b = vec![iv(0.0, 1.0)];
        assert!(ParameterVector::with_bounds(vec![2.0], b.clone()).is_err());
        let p = ParameterVector::with_bounds(vec![0.5], b).unwrap();
        assert_eq!(p.with_values_clamped(&[3.0]).values(), &[1.0]);
        assert!(ParameterVector::new(vec![f64::NAN]).is_err());
    }
}
