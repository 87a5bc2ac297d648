use rayon::prelude::*;

use super::lines::{map_lines, min_plus_quadratic};
use super::{CostSpec, DualPotentials};
use crate::fvm::Grid3;

/// `ψ(y) = min_x { c(x, y) − φ(x) }` over all cells.
///
/// For `p = 2` the minimum is taken one axis at a time, `O(n·Σ n_d)`;
/// otherwise every pair is visited.
pub fn c_transform(phi: &[f64], grid: &Grid3, p: f64) -> Vec<f64> {
    assert_eq!(phi.len(), grid.len(), "potential does not match the grid");
    let neg: Vec<f64> = phi.iter().map(|v| -v).collect();
    if p == 2.0 {
        let counts = grid.counts();
        let h = grid.spacing();
        let mut w = neg;
        for d in 0..3 {
            if counts[d] > 1 {
                w = map_lines(counts, d, &w, |i, o| min_plus_quadratic(i, o, h[d]));
            }
        }
        w
    } else {
        let spec = CostSpec {
            p,
            ..CostSpec::default()
        };
        (0..grid.len())
            .into_par_iter()
            .map(|j| {
                (0..grid.len())
                    .map(|i| spec.pair_cost(grid, i, j) + neg[i])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}

/// `(φ^{cc}, φ^c)`: a feasible pair whose dual value is at least that of
/// `(φ, φ^c)`. The cost is symmetric, so both transforms use the same routine.
pub fn round_potentials(phi: &[f64], grid: &Grid3, p: f64) -> DualPotentials {
    let psi = c_transform(phi, grid, p);
    let phi_cc = c_transform(&psi, grid, p);
    DualPotentials {
        phi: phi_cc,
        psi,
        cconcave: true,
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dynamics::Interval;

    fn grid() -> Grid3 {
        Grid3::uniform(
            &[
                Interval { lo: 0.0, hi: 3.0 },
                Interval { lo: -1.0, hi: 1.0 },
                Interval { lo: 0.0, hi: 2.0 },
            ],
            [4, 3, 2],
        )
        .unwrap()
    }

    fn brute(phi: &[f64], g: &Grid3, p: f64) -> Vec<f64> {
        let spec = CostSpec {
            p,
            ..CostSpec::default()
        };
        (0..g.len())
            .map(|j| {
                (0..g.len())
                    .map(|i| spec.pair_cost(g, i, j) - phi[i])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn zero_potential_transforms_to_zero() {
        let g = grid();
        assert!(c_transform(&vec![0.0; g.len()], &g, 2.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn separable_matches_brute_force() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let phi: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let fast = c_transform(&phi, &g, 2.0);
            let slow = brute(&phi, &g, 2.0);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn double_transform_is_idempotent() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in [2.0, 1.0, 1.5] {
            let phi: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cc = round_potentials(&phi, &g, p).phi;
            let cccc = round_potentials(&cc, &g, p).phi;
            for (a, b) in cc.iter().zip(&cccc) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(cc.iter().zip(&phi).all(|(a, b)| a >= &(b - 1e-12)));
        }
    }
}
