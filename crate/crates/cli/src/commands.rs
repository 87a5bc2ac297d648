use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use measinv::dynamics::Point3;
use measinv::gradient::{ForwardModel, GradientMethod, InverseProblem};
use measinv::io::{read_density, read_trajectory_points, write_density, write_potential, write_trajectory};
use measinv::optimize::run;
use measinv::ot::sinkhorn;
use measinv::simulate::{integrate, occupation_histogram, subsample, Trajectory};
use measinv::stationary::{loglog_slope, DensityField};
use toml::{Table, Value};

use crate::config::{ReferenceSource, RunConfig};
use crate::error::CliError;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig, out_override: Option<PathBuf>) -> Result<Self, CliError> {
        let out = out_override.unwrap_or_else(|| cfg.io.output_dir.clone());
        fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
        let ctx = Context { cfg, out };
        let mut echo = ctx.cfg.clone();
        echo.io.output_dir = ctx.out.clone();
        fs::write(ctx.path("config.resolved.toml"), echo.to_toml())?;
        Ok(ctx)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_summary(&self, name: &str, table: &Table) -> Result<(), CliError> {
        let text = toml::to_string(table).expect("summary serialises");
        print!("{text}");
        fs::write(self.path(name), text)?;
        Ok(())
    }
}

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn int(n: usize) -> Value {
    Value::Integer(n as i64)
}

fn simulate_trajectory(cfg: &RunConfig) -> Result<Trajectory, CliError> {
    let spec = cfg.system_spec()?;
    let d = &cfg.data;
    Ok(integrate(&spec, &cfg.theta()?, d.x0, d.dt, d.t_end, &d.noise)?)
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let traj = simulate_trajectory(&ctx.cfg)?;
    let path = ctx.path("trajectory.csv");
    write_trajectory(BufWriter::new(File::create(&path)?), &traj)?;
    let spec = ctx.cfg.system_spec()?;
    let dom = spec.domain();
    let outside = traj
        .samples()
        .iter()
        .filter(|p| (0..3).any(|k| !dom[k].contains(p[k])))
        .count();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in traj.samples() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let mut t = Table::new();
    t.insert("trajectory".into(), Value::String(path.display().to_string()));
    t.insert("states".into(), int(traj.len()));
    t.insert("t_end".into(), Value::Float(traj.t_end));
    t.insert("min".into(), floats(&lo));
    t.insert("max".into(), floats(&hi));
    t.insert("outside_domain".into(), int(outside));
    ctx.write_summary("simulate.toml", &t)
}

/// Points for histogramming: the configured trajectory file, or a fresh
/// simulation, with burn-in removed.
fn reference_points(cfg: &RunConfig) -> Result<Vec<Point3>, CliError> {
    let all = match &cfg.io.trajectory {
        Some(p) => read_trajectory_points(File::open(p)?)?,
        None => simulate_trajectory(cfg)?.samples().to_vec(),
    };
    if all.is_empty() {
        return Err(CliError::Config("trajectory has no states".into()));
    }
    let skip = (cfg.data.burn_in * all.len() as f64).floor() as usize;
    Ok(all[skip.min(all.len() - 1)..].to_vec())
}

fn histogram(cfg: &RunConfig, points: &[Point3]) -> Result<(DensityField, usize), CliError> {
    let grid = cfg.grid()?;
    let kept = match cfg.data.subsample {
        Some(n) => subsample(points, n, cfg.data.subsample_seed)?,
        None => points.to_vec(),
    };
    let occ = occupation_histogram(&kept, &grid)?;
    Ok((occ.density, occ.outside))
}

pub fn hist(ctx: &Context) -> Result<(), CliError> {
    let points = reference_points(&ctx.cfg)?;
    let (rho, outside) = histogram(&ctx.cfg, &points)?;
    let path = ctx.path("density.bin");
    write_density(&path, &rho)?;
    let mut t = Table::new();
    t.insert("density".into(), Value::String(path.display().to_string()));
    t.insert("cells".into(), int(rho.len()));
    t.insert("points".into(), int(points.len()));
    t.insert("outside".into(), int(outside));
    if !ctx.cfg.data.sweep.is_empty() {
        let grid = ctx.cfg.grid()?;
        let full = occupation_histogram(&points, &grid)?.density;
        let mut w = csv::Writer::from_path(ctx.path("sweep.csv")).map_err(|e| CliError::Io(e.to_string()))?;
        w.write_record(["n", "l1", "l2"]).map_err(|e| CliError::Io(e.to_string()))?;
        let mut pts = Vec::new();
        for &n in &ctx.cfg.data.sweep {
            let sample = subsample(&points, n, ctx.cfg.data.subsample_seed)?;
            let h = occupation_histogram(&sample, &grid)?.density;
            let l1 = h.l1_distance(&full)?;
            let l2 = h
                .mass()
                .iter()
                .zip(full.mass())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            w.serialize((n, l1, l2)).map_err(|e| CliError::Io(e.to_string()))?;
            pts.push((n as f64, l2));
        }
        w.flush()?;
        if let Some(s) = loglog_slope(&pts) {
            t.insert("sweep_l2_slope".into(), Value::Float(s));
        }
    }
    ctx.write_summary("hist.toml", &t)
}

fn forward_model(cfg: &RunConfig) -> Result<ForwardModel, CliError> {
    Ok(ForwardModel::new(
        cfg.system_spec()?,
        cfg.grid()?,
        &cfg.forward,
        &cfg.cfl_thetas(),
    )?)
}

pub fn steady(ctx: &Context) -> Result<(), CliError> {
    let model = forward_model(&ctx.cfg)?;
    let theta = ctx.cfg.theta()?;
    let (_, sol) = model.stationary(&theta)?;
    let path = ctx.path("steady.bin");
    write_density(&path, &sol.density)?;
    let mut t = Table::new();
    t.insert("density".into(), Value::String(path.display().to_string()));
    t.insert("cells".into(), int(sol.density.len()));
    t.insert("theta".into(), floats(&theta));
    t.insert("epsilon".into(), Value::Float(model.epsilon()));
    t.insert("time_scale".into(), Value::Float(model.time_scale()));
    t.insert("residual_inf".into(), Value::Float(sol.residual));
    ctx.write_summary("steady.toml", &t)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("{key} is required for this subcommand")))
}

pub fn dist(ctx: &Context) -> Result<(), CliError> {
    let a = read_density(required(&ctx.cfg.io.density_a, "io.density_a")?)?;
    let b = read_density(required(&ctx.cfg.io.density_b, "io.density_b")?)?;
    let r = sinkhorn(&a, &b, &ctx.cfg.ot)?;
    write_potential(&ctx.path("phi.bin"), a.grid(), &r.potentials.phi)?;
    write_potential(&ctx.path("psi.bin"), a.grid(), &r.potentials.psi)?;
    let mut t = Table::new();
    t.insert("cost".into(), Value::Float(r.cost));
    t.insert("dual_cost".into(), Value::Float(r.dual_cost));
    t.insert("entropic_cost".into(), Value::Float(r.entropic_cost));
    t.insert("eta".into(), Value::Float(r.eta));
    t.insert("iterations".into(), int(r.iterations));
    t.insert("marginal_violation".into(), Value::Float(r.marginal_violation));
    ctx.write_summary("dist.toml", &t)
}

fn reference_density(cfg: &RunConfig, model: &ForwardModel) -> Result<DensityField, CliError> {
    let rho = match cfg.reference.source {
        ReferenceSource::Forward => {
            let theta = cfg
                .reference
                .theta
                .as_ref()
                .ok_or_else(|| CliError::Config("reference.theta is required".into()))?;
            model.stationary(theta)?.1.density
        }
        ReferenceSource::Dns => histogram(cfg, &reference_points(cfg)?)?.0,
        ReferenceSource::File => read_density(required(&cfg.reference.path, "reference.path")?)?,
    };
    if rho.grid() != model.grid() {
        return Err(CliError::Config("reference density does not live on the configured grid".into()));
    }
    Ok(rho)
}

fn problem(ctx: &Context) -> Result<InverseProblem, CliError> {
    let model = forward_model(&ctx.cfg)?;
    let rho_star = reference_density(&ctx.cfg, &model)?;
    write_density(&ctx.path("reference.bin"), &rho_star)?;
    Ok(InverseProblem::new(
        model,
        rho_star,
        ctx.cfg.ot.clone(),
        ctx.cfg.gradient.clone(),
    )?)
}

pub fn infer(ctx: &Context) -> Result<(), CliError> {
    ctx.cfg.validate_infer()?;
    let p = problem(ctx)?;
    let trace = run(&p, &ctx.cfg.infer)?;
    trace.write_csv(BufWriter::new(File::create(ctx.path("trace.csv"))?))?;
    let mut t = Table::new();
    t.insert("status".into(), Value::String(format!("{:?}", trace.status)));
    t.insert("iterations".into(), int(trace.records.len() - 1));
    t.insert("theta".into(), floats(trace.final_theta()));
    t.insert("f".into(), Value::Float(trace.final_loss()));
    t.insert("time_scale".into(), Value::Float(p.forward().time_scale()));
    ctx.write_summary("infer.toml", &t)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn gradcheck(ctx: &Context) -> Result<(), CliError> {
    let p = problem(ctx)?;
    let theta = if ctx.cfg.infer.theta0.is_empty() {
        ctx.cfg.theta()?
    } else {
        ctx.cfg.infer.theta0.clone()
    };
    let eval = p.evaluate(&theta)?;
    let ift = p.gradient(&eval, GradientMethod::Ift)?;
    let adj = p.gradient(&eval, GradientMethod::Adjoint)?;
    let fd = p.finite_difference_grad(&theta)?;
    let names = p.forward().spec().param_names().to_vec();
    let mut w = csv::Writer::from_path(ctx.path("gradcheck.csv")).map_err(|e| CliError::Io(e.to_string()))?;
    w.write_record(["parameter", "ift", "adjoint", "finite_difference", "rel_ift_adjoint", "rel_adjoint_fd"])
        .map_err(|e| CliError::Io(e.to_string()))?;
    println!(
        "{:<10} {:>16} {:>16} {:>16} {:>12} {:>12}",
        "parameter", "ift", "adjoint", "fd", "ift/adj", "adj/fd"
    );
    for k in 0..theta.len() {
        let (a, b, c) = (ift.grad[k], adj.grad[k], fd[k]);
        println!(
            "{:<10} {:>16.8e} {:>16.8e} {:>16.8e} {:>12.2e} {:>12.2e}",
            names[k],
            a,
            b,
            c,
            rel(a, b),
            rel(b, c)
        );
        w.serialize((&names[k], a, b, c, rel(a, b), rel(b, c)))
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    info!("loss {:.6e} at {theta:?}", eval.f);
    let mut t = Table::new();
    t.insert("theta".into(), floats(&theta));
    t.insert("f".into(), Value::Float(eval.f));
    let worst = ift.residuals.iter().chain(&adj.residuals).fold(0.0f64, |m, r| m.max(*r));
    t.insert("max_relative_residual".into(), Value::Float(worst));
    ctx.write_summary("gradcheck.toml", &t)
}
