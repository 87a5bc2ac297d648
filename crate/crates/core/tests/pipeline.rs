use measinv::dynamics::{Interval, SystemSpec};
use measinv::fvm::{assemble_for, cfl_constant, face_velocities, teleport, Grid3};
use measinv::gradient::{loss_and_grad, ForwardConfig, ForwardModel, GradientConfig, InverseProblem};
use measinv::io::{read_density, write_density};
use measinv::ot::{sinkhorn, CostSpec};
use measinv::simulate::{integrate, occupation_histogram, NoiseSpec};
use measinv::stationary::DensityField;
use proptest::prelude::*;

fn lorenz_truth() -> Vec<f64> {
    vec![10.0, 28.0, 8.0 / 3.0]
}

#[test]
fn histogram_survives_a_file_roundtrip() {
    let spec = SystemSpec::lorenz();
    let traj = integrate(&spec, &lorenz_truth(), [1.0, 1.0, 1.0], 1e-3, 10.0, &NoiseSpec::none()).unwrap();
    let grid = Grid3::with_spacing(spec.domain(), 5.0).unwrap();
    let hist = occupation_histogram(traj.after_burn_in(0.1).unwrap(), &grid).unwrap().density;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.bin");
    write_density(&path, &hist).unwrap();
    let back = read_density(&path).unwrap();
    assert_eq!(back.grid(), hist.grid());
    assert_eq!(back.mass(), hist.mass());
}

#[test]
fn exact_reference_is_a_stationary_point() {
    let spec = SystemSpec::lorenz();
    let grid = Grid3::with_spacing(spec.domain(), 6.0).unwrap();
    let truth = lorenz_truth();
    let model = ForwardModel::new(spec, grid, &ForwardConfig::default(), &[truth.clone(), vec![9.0, 28.0, 8.0 / 3.0]]).unwrap();
    let rho_star = model.stationary(&truth).unwrap().1.density;
    let p = InverseProblem::new(model, rho_star, CostSpec::default(), GradientConfig::default()).unwrap();
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = p.loss_and_grad(&truth).unwrap();
    assert!(r.f_value.abs() < 1e-8, "f = {}", r.f_value);
    let away = p.loss_and_grad(&[9.0, 28.0, 8.0 / 3.0]).unwrap();
    assert!(away.f_value > 0.0);
    // what remains at the truth is Sinkhorn tolerance noise
    assert!(norm(&r.grad) < 1e-3 * norm(&away.grad), "{:?} vs {:?}", r.grad, away.grad);
}

#[test]
fn one_shot_matches_problem_api() {
    let spec = SystemSpec::chen();
    let theta = spec.reference_parameters().unwrap();
    let grid = Grid3::uniform(spec.domain(), [5, 5, 5]).unwrap();
    let rho_star = DensityField::uniform(grid.clone());
    let fwd = ForwardConfig::default();
    let cfg = GradientConfig {
        warm_start: false,
        ..GradientConfig::default()
    };
    let a = loss_and_grad(&spec, &theta, &rho_star, &fwd, &CostSpec::default(), &cfg).unwrap();
    let model = ForwardModel::new(spec, grid, &fwd, &[theta.clone()]).unwrap();
    let p = InverseProblem::new(model, rho_star, CostSpec::default(), cfg).unwrap();
    let b = p.loss_and_grad(&theta).unwrap();
    assert_eq!(a.f_value, b.f_value);
    assert_eq!(a.grad, b.grad);
}

#[test]
fn transport_to_itself_is_free() {
    let spec = SystemSpec::rossler();
    let theta = spec.reference_parameters().unwrap();
    let grid = Grid3::uniform(spec.domain(), [6, 6, 6]).unwrap();
    let model = ForwardModel::new(spec, grid, &ForwardConfig::default(), &[theta.clone()]).unwrap();
    let rho = model.stationary(&theta).unwrap().1.density;
    let r = sinkhorn(&rho, &rho, &CostSpec::default()).unwrap();
    assert!(r.dual_cost <= 1e-12 && r.cost >= r.dual_cost);
    assert!(r.cost < 1e-2 * rho.grid().diameter().powi(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn markov_step_keeps_mass_and_sign(
        nx in 2usize..7, ny in 2usize..7, nz in 1usize..5,
        scale in 0.5f64..1.5,
        eps in 1e-6f64..0.5,
        weights in prop::collection::vec(0.0f64..1.0, 6 * 6 * 4),
    ) {
        let spec = SystemSpec::lorenz();
        let theta: Vec<f64> = lorenz_truth().iter().map(|v| v * scale).collect();
        let grid = Grid3::uniform(spec.domain(), [nx, ny, nz]).unwrap();
        let faces = face_velocities(&spec, &theta, &grid).unwrap();
        let c = cfl_constant(&faces, &grid, 0.9).unwrap().unwrap();
        let m = teleport(assemble_for(&spec, &theta, &grid).unwrap(), c, eps).unwrap();
        let mut w = weights[..grid.len()].to_vec();
        w[0] += 1e-3;
        let rho = DensityField::from_weights(grid.clone(), w).unwrap();
        let next = m.matvec(rho.mass());
        prop_assert!((next.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        prop_assert!(next.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn histogram_mass_is_one(points in prop::collection::vec(
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..200)
    ) {
        let unit = Interval::new(0.0, 1.0).unwrap();
        let grid = Grid3::uniform(&[unit; 3], [3, 4, 5]).unwrap();
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.0, p.1, p.2]).collect();
        let occ = occupation_histogram(&pts, &grid).unwrap();
        prop_assert_eq!(occ.inside, pts.len());
        prop_assert!((occ.density.mass().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
