use super::{check_pair, DualPotentials};
use crate::error::{Error, Result};
use crate::stationary::DensityField;

/// Exact transport between two densities on a line.
#[derive(Debug, Clone)]
pub struct Exact1d {
    pub cost: f64,
    /// Monotone coupling as `(source cell, target cell, mass)`.
    pub coupling: Vec<(usize, usize, f64)>,
    /// Feasible optimal pair, c-transform-rounded over every cell.
    pub potentials: DualPotentials,
}

/// `W_p^p` between two densities on a one-dimensional grid (only the x axis
/// may have more than one cell), via the monotone (quantile) coupling of
/// point masses at cell centres. The coupling is optimal for any convex cost
/// of `|x − y|`, so the result is exact up to round-off.
pub fn transport_cost_exact_1d(mu: &DensityField, nu: &DensityField, p: f64) -> Result<Exact1d> {
    check_pair(mu, nu)?;
    let grid = mu.grid();
    let counts = grid.counts();
    if counts[1] != 1 || counts[2] != 1 {
        return Err(Error::invalid("exact 1-D transport needs a grid with one cell along y and z"));
    }
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("cost exponent p = {p} must be >= 1")));
    }
    let a = mu.mass();
    let b = nu.mass();
    let gap = a.iter().sum::<f64>() - b.iter().sum::<f64>();
    if gap.abs() > 1e-12 {
        return Err(Error::invalid(format!("total masses differ by {gap:e}")));
    }
    let x: Vec<f64> = (0..grid.len()).map(|i| grid.cell_center(i)[0]).collect();
    let cost_fn = |i: usize, j: usize| (x[i] - x[j]).abs().powf(p);

    let src: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let dst: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();

    let mut coupling = Vec::with_capacity(src.len() + dst.len());
    let (mut si, mut dj) = (0, 0);
    let (mut ra, mut rb) = (a[src[0]], b[dst[0]]);
    while si < src.len() && dj < dst.len() {
        let t = ra.min(rb);
        coupling.push((src[si], dst[dj], t));
        if ra <= rb {
            rb -= ra;
            si += 1;
            if si < src.len() {
                ra = a[src[si]];
            }
        } else {
            ra -= rb;
            dj += 1;
            if dj < dst.len() {
                rb = b[dst[dj]];
            }
        }
    }
    let cost: f64 = coupling.iter().map(|&(i, j, m)| m * cost_fn(i, j)).sum();

    // Complementary slackness along the staircase: every coupled pair is tight.
    let n = a.len();
    let mut phi = vec![f64::NAN; n];
    let mut psi = vec![f64::NAN; n];
    let mut last_j: Option<usize> = None;
    for &(i, j, _) in &coupling {
        if phi[i].is_nan() {
            phi[i] = match last_j {
                Some(lj) => cost_fn(i, lj) - psi[lj],
                None => 0.0,
            };
        }
        if psi[j].is_nan() {
            psi[j] = cost_fn(i, j) - phi[i];
        }
        last_j = Some(j);
    }

    // Extend to all cells by c-transforms: ψ over the source support, then φ.
    let psi_full: Vec<f64> = (0..n)
        .map(|j| {
            src.iter()
                .filter(|&&i| !phi[i].is_nan())
                .map(|&i| cost_fn(i, j) - phi[i])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let phi_full: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| cost_fn(i, j) - psi_full[j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    Ok(Exact1d {
        cost,
        coupling,
        potentials: DualPotentials {
            phi: phi_full,
            psi: psi_full,
            cconcave: true,
        },
    })
}
