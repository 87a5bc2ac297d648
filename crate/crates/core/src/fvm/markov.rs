use crate::error::{Error, Result};

use super::{verify_cfl, CscMatrix, UpwindOperator};

/// Teleported transfer operator `M_ε = (1−ε)(I + cK) + (ε/n)·1·1ᵀ`.
///
/// The rank-one part is applied implicitly and never stored.
#[derive(Debug, Clone)]
pub struct MarkovOperator {
    base: UpwindOperator,
    c: f64,
    epsilon: f64,
}

/// Build `M_ε` from an assembled operator, asserting the CFL condition.
pub fn teleport(base: UpwindOperator, c: f64, epsilon: f64) -> Result<MarkovOperator> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} must lie in [0, 1)")));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid(format!("time scale c = {c} must be positive")));
    }
    verify_cfl(&base, c)?;
    Ok(MarkovOperator { base, c, epsilon })
}

impl MarkovOperator {
    pub fn base(&self) -> &UpwindOperator {
        &self.base
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim() as f64;
        let total: f64 = x.iter().sum();
        let kx = self.base.matrix.matvec(x);
        let a = 1.0 - self.epsilon;
        let shift = self.epsilon / n * total;
        x.iter()
            .zip(&kx)
            .map(|(xi, ki)| a * (xi + self.c * ki) + shift)
            .collect()
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim() as f64;
        let total: f64 = x.iter().sum();
        let kx = self.base.matrix.matvec_transpose(x);
        let a = 1.0 - self.epsilon;
        let shift = self.epsilon / n * total;
        x.iter()
            .zip(&kx)
            .map(|(xi, ki)| a * (xi + self.c * ki) + shift)
            .collect()
    }

    /// `(M_ε − I)` restricted to its sparse part:
    /// `(1−ε)(I + cK) − I = (1−ε)cK − εI`.
    pub fn shifted_matrix(&self) -> CscMatrix {
        self.base
            .matrix
            .scaled_plus_identity((1.0 - self.epsilon) * self.c, -self.epsilon)
    }

    /// `∂M_ε x = (1−ε)·c·∂K·x` for one parameter derivative `∂K`.
    pub fn derivative_apply(&self, dk: &UpwindOperator, x: &[f64]) -> Vec<f64> {
        let s = (1.0 - self.epsilon) * self.c;
        dk.matrix.matvec(x).into_iter().map(|v| s * v).collect()
    }

    /// Dense `M_ε`, for oracles on small grids.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut d = self.base.matrix.to_dense();
        let a = 1.0 - self.epsilon;
        let t = self.epsilon / n as f64;
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                *v = a * (id + self.c * *v) + t;
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dynamics::{Interval, SystemSpec};
    use crate::fvm::test_support::*;
    use crate::fvm::{assemble_for, face_velocities, cfl_constant, Grid3};

    fn lorenz_op(counts: [usize; 3], eps: f64) -> MarkovOperator {
        let spec = SystemSpec::lorenz();
        let g = Grid3::uniform(spec.domain(), counts).unwrap();
        let theta = [10.0, 28.0, 8.0 / 3.0];
        let faces = face_velocities(&spec, &theta, &g).unwrap();
        let c = cfl_constant(&faces, &g, 0.9).unwrap().unwrap();
        teleport(assemble_for(&spec, &theta, &g).unwrap(), c, eps).unwrap()
    }

    #[test]
    fn zero_epsilon_is_plain_explicit_step() {
        let g = Grid3::line(0.0, 3.0, 3).unwrap();
        let k = assemble_for(&constant_x_flow(), &[1.0], &g).unwrap();
        let m = teleport(k, 0.5, 0.0).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, 0.0]), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn uniform_fixed_by_teleported_identity() {
        let g = Grid3::uniform(&[Interval { lo: 0.0, hi: 1.0 }; 3], [2, 2, 2]).unwrap();
        let k = assemble_for(&zero_flow(), &[0.0], &g).unwrap();
        let m = teleport(k, 1.0, 0.3).unwrap();
        let u = vec![0.125; 8];
        for (a, b) in m.matvec(&u).iter().zip(&u) {
            assert!((a - b).abs() < 1e-16);
        }
    }

    #[test]
    fn matvec_preserves_sum() {
        let m = lorenz_op([6, 6, 6], 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x: Vec<f64> = (0..m.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s0: f64 = x.iter().sum();
            let s1: f64 = m.matvec(&x).iter().sum();
            assert!((s0 - s1).abs() < 1e-13, "{s0} vs {s1}");
        }
    }

    #[test]
    fn simplex_maps_to_simplex() {
        let m = lorenz_op([5, 5, 5], 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x: Vec<f64> = (0..m.dim()).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = x.iter().sum();
        x.iter_mut().for_each(|v| *v /= s);
        let y = m.matvec(&x);
        assert!(y.iter().all(|&v| v >= 0.0));
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transpose_matches_dense() {
        let m = lorenz_op([3, 3, 2], 0.1);
        let d = m.to_dense();
        let x: Vec<f64> = (0..m.dim()).map(|i| (i as f64).sin()).collect();
        let y = m.matvec_transpose(&x);
        for j in 0..m.dim() {
            let expect: f64 = (0..m.dim()).map(|i| d[i][j] * x[i]).sum();
            assert!((y[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_matrix_is_m_minus_identity_without_rank_one() {
        let m = lorenz_op([3, 3, 3], 0.05);
        let a = m.shifted_matrix();
        let x: Vec<f64> = (0..m.dim()).map(|i| (i as f64 * 0.3).cos()).collect();
        let total: f64 = x.iter().sum();
        let mx = m.matvec(&x);
        let ax = a.matvec(&x);
        for i in 0..m.dim() {
            let expect = mx[i] - x[i] - 0.05 / m.dim() as f64 * total;
            assert!((ax[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = Grid3::line(0.0, 3.0, 3).unwrap();
        let k = assemble_for(&constant_x_flow(), &[1.0], &g).unwrap();
        assert!(teleport(k.clone(), 0.5, 1.0).is_err());
        assert!(teleport(k.clone(), 0.5, -0.1).is_err());
        assert!(matches!(teleport(k, 2.0, 0.1), Err(Error::CflViolation { .. })));
    }
}
