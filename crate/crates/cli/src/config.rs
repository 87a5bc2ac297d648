//! Run configuration: one TOML file per run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use measinv::dynamics::{FnField, Interval, SystemSpec};
use measinv::fvm::{box_corners, Axis, Grid3};
use measinv::gradient::{ForwardConfig, GradientConfig};
use measinv::optimize::InferenceConfig;
use measinv::ot::CostSpec;
use measinv::simulate::NoiseSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemChoice {
    Lorenz,
    Rossler,
    Chen,
    ArctanLorenz,
    /// Zero velocity with one unused parameter; needs an explicit domain.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub kind: SystemChoice,
    /// Parameters for forward runs; defaults to the system's reference values.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    /// Box for inference, `[[lo, hi], ...]`.
    #[serde(default)]
    pub bounds: Option<Vec<[f64; 2]>>,
    /// State-space box, `[[lo, hi]; 3]`; defaults to the system's own.
    #[serde(default)]
    pub domain: Option<[[f64; 2]; 3]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    /// Defaults to the system domain.
    #[serde(default)]
    pub bounds: Option<[[f64; 2]; 3]>,
    #[serde(default)]
    pub dx: Option<f64>,
    #[serde(default)]
    pub counts: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    pub dt: f64,
    pub t_end: f64,
    pub x0: [f64; 3],
    pub burn_in: f64,
    pub noise: NoiseSpec,
    /// Number of random states kept for the histogram; all when unset.
    pub subsample: Option<usize>,
    pub subsample_seed: u64,
    /// Sample sizes for the subsampling study written by `hist`.
    pub sweep: Vec<usize>,
}

impl Default for DataBlock {
    fn default() -> Self {
        DataBlock {
            dt: 1e-3,
            t_end: 100.0,
            x0: [1.0, 1.0, 1.0],
            burn_in: 0.01,
            noise: NoiseSpec::default(),
            subsample: None,
            subsample_seed: 0,
            sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// Stationary density of the forward model at `reference.theta`.
    #[default]
    Forward,
    /// Histogram of a simulated trajectory (data block).
    Dns,
    /// Density file at `reference.path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceBlock {
    pub source: ReferenceSource,
    /// Defaults to `system.theta`.
    pub theta: Option<Vec<f64>>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoBlock {
    pub output_dir: PathBuf,
    /// Input trajectory CSV for `hist`; simulated inline when unset.
    pub trajectory: Option<PathBuf>,
    /// Input densities for `dist`.
    pub density_a: Option<PathBuf>,
    pub density_b: Option<PathBuf>,
}

impl Default for IoBlock {
    fn default() -> Self {
        IoBlock {
            output_dir: PathBuf::from("out"),
            trajectory: None,
            density_a: None,
            density_b: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
    pub system: SystemBlock,
    #[serde(default)]
    pub grid: GridBlock,
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub data: DataBlock,
    #[serde(default)]
    pub ot: CostSpec,
    #[serde(default)]
    pub gradient: GradientConfig,
    #[serde(default)]
    pub infer: InferenceConfig,
    #[serde(default)]
    pub reference: ReferenceBlock,
    #[serde(default)]
    pub io: IoBlock,
}

fn intervals(list: &[[f64; 2]]) -> Result<Vec<Interval>, CliError> {
    list.iter()
        .map(|[lo, hi]| Interval::new(*lo, *hi).map_err(CliError::from_config))
        .collect()
}

fn box3(b: &[[f64; 2]; 3]) -> Result<[Interval; 3], CliError> {
    let v = intervals(b)?;
    Ok([v[0], v[1], v[2]])
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.fill_defaults()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolve values that default to other values, so the echoed config is
    /// complete.
    fn fill_defaults(&mut self) -> Result<(), CliError> {
        let spec = self.system_spec()?;
        if self.system.theta.is_none() {
            self.system.theta = spec.reference_parameters();
        }
        if self.system.domain.is_none() {
            self.system.domain = Some(spec.domain().map(|i| [i.lo, i.hi]));
        }
        if self.infer.bounds.is_none() {
            if let Some(b) = &self.system.bounds {
                self.infer.bounds = Some(intervals(b)?);
            }
        }
        if self.reference.theta.is_none() {
            self.reference.theta = self.system.theta.clone();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let spec = self.system_spec()?;
        let m = spec.arity();
        let check_len = |what: &str, len: usize| {
            if len == m {
                Ok(())
            } else {
                Err(CliError::Config(format!("{what} has {len} entries, system has {m} parameters")))
            }
        };
        if let Some(t) = &self.system.theta {
            check_len("system.theta", t.len())?;
        }
        if let Some(b) = &self.system.bounds {
            check_len("system.bounds", b.len())?;
            intervals(b)?;
        }
        if let Some(t) = &self.reference.theta {
            check_len("reference.theta", t.len())?;
        }
        if self.grid.dx.is_some() == self.grid.counts.is_some() {
            return Err(CliError::Config("grid needs exactly one of `dx` or `counts`".into()));
        }
        self.grid()?;
        self.forward.validate().map_err(CliError::from_config)?;
        self.ot.validate().map_err(CliError::from_config)?;
        self.data.noise.validate().map_err(CliError::from_config)?;
        if !(self.data.dt > 0.0 && self.data.t_end > 0.0) {
            return Err(CliError::Config("data.dt and data.t_end must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.burn_in) {
            return Err(CliError::Config("data.burn_in must lie in [0, 1)".into()));
        }
        if self.reference.source == ReferenceSource::File && self.reference.path.is_none() {
            return Err(CliError::Config("reference.source = \"file\" needs reference.path".into()));
        }
        for p in [
            &self.io.trajectory,
            &self.io.density_a,
            &self.io.density_b,
            &self.reference.path,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(CliError::Io(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Validate the inference block; only `infer` needs it.
    pub fn validate_infer(&self) -> Result<(), CliError> {
        let m = self.system_spec()?.arity();
        self.infer.validate(m).map_err(CliError::from_config)
    }

    pub fn system_spec(&self) -> Result<SystemSpec, CliError> {
        let spec = match self.system.kind {
            SystemChoice::Lorenz => SystemSpec::lorenz(),
            SystemChoice::Rossler => SystemSpec::rossler(),
            SystemChoice::Chen => SystemSpec::chen(),
            SystemChoice::ArctanLorenz => SystemSpec::arctan_lorenz(),
            SystemChoice::Zero => {
                let domain = self
                    .system
                    .domain
                    .as_ref()
                    .ok_or_else(|| CliError::Config("system kind \"zero\" needs system.domain".into()))?;
                let field = FnField::new(
                    1,
                    |_: &[f64], _| [0.0; 3],
                    |_: &[f64], _, out: &mut [[f64; 3]]| out[0] = [0.0; 3],
                );
                return SystemSpec::custom(vec!["unused".into()], box3(domain)?, Arc::new(field))
                    .map_err(CliError::from_config);
            }
        };
        match &self.system.domain {
            Some(d) => spec.with_domain(box3(d)?).map_err(CliError::from_config),
            None => Ok(spec),
        }
    }

    pub fn theta(&self) -> Result<Vec<f64>, CliError> {
        self.system
            .theta
            .clone()
            .ok_or_else(|| CliError::Config("system.theta is required for this system".into()))
    }

    pub fn grid(&self) -> Result<Grid3, CliError> {
        let bounds = match (&self.grid.bounds, &self.system.domain) {
            (Some(b), _) | (None, Some(b)) => box3(b)?,
            (None, None) => *self.system_spec()?.domain(),
        };
        let grid = match (self.grid.dx, self.grid.counts) {
            (Some(dx), None) => Grid3::with_spacing(&bounds, dx),
            (None, Some(c)) => Grid3::new([0, 1, 2].map(|d| Axis {
                lo: bounds[d].lo,
                hi: bounds[d].hi,
                count: c[d],
            })),
            _ => return Err(CliError::Config("grid needs exactly one of `dx` or `counts`".into())),
        };
        grid.map_err(CliError::from_config)
    }

    /// Parameter vectors the CFL constant must cover: the box corners when
    /// bounds are known, plus every θ named in the config.
    pub fn cfl_thetas(&self) -> Vec<Vec<f64>> {
        let mut out = match &self.infer.bounds {
            Some(b) => box_corners(b),
            None => Vec::new(),
        };
        out.extend(self.system.theta.clone());
        out.extend(self.reference.theta.clone());
        if !self.infer.theta0.is_empty() {
            out.push(self.infer.theta0.clone());
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}
