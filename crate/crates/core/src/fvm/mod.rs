//! First-order upwind finite-volume discretisation of the stationary
//! continuity equation `∇·(vρ) = 0` on a uniform box grid.
//!
//! Each cell stores its mass. Flux through a face uses the mass of the
//! upstream cell, split by the sign of the face-normal velocity:
//! `F = v⁺ ρ_lower + v⁻ ρ_upper` with `v⁺ = max(v, 0)`, `v⁻ = min(v, 0)`.
//! Faces on the domain boundary carry zero velocity, so mass never leaves
//! the box and every column of the assembled operator sums to zero.
//!
//! The time step is folded into the scalar `c` of the Markov operator
//! `M = I + cK`; `K` itself is assembled with `Δt = 1`.

mod csc;
mod grid;
mod markov;

pub use csc::CscMatrix;
pub use grid::{Axis, Grid3};
pub use markov::{teleport, MarkovOperator};

use rayon::prelude::*;

use crate::dynamics::{Interval, SystemSpec};
use crate::error::{Error, Result};

/// Face-normal velocities along one axis, stored per cell for the cell's
/// lower face (`x_i − Δx/2`). The upper face of a cell is the lower face of
/// its successor; lower faces on the boundary are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisFaces {
    pub v: Vec<f64>,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl AxisFaces {
    fn from_raw(v: Vec<f64>) -> Self {
        let plus = v.iter().map(|&x| x.max(0.0)).collect();
        let minus = v.iter().map(|&x| x.min(0.0)).collect();
        AxisFaces { v, plus, minus }
    }

    fn zeros(n: usize) -> Self {
        AxisFaces {
            v: vec![0.0; n],
            plus: vec![0.0; n],
            minus: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocities {
    pub axes: [AxisFaces; 3],
}

impl FaceVelocities {
    /// Largest face speed per axis.
    pub fn max_abs(&self) -> [f64; 3] {
        self.axes
            .each_ref()
            .map(|a| a.v.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
    }
}

fn is_interior_lower_face(grid: &Grid3, cell: usize, axis: usize) -> bool {
    grid.coords(cell)[axis] > 0
}

fn lower_face_center(grid: &Grid3, cell: usize, axis: usize) -> [f64; 3] {
    let mut p = grid.cell_center(cell);
    p[axis] -= 0.5 * grid.spacing()[axis];
    p
}

/// Face-normal velocities with their upwind split; boundary faces are pinned
/// to exactly zero.
pub fn face_velocities(spec: &SystemSpec, theta: &[f64], grid: &Grid3) -> Result<FaceVelocities> {
    spec.velocity(theta, [0.0; 3])?;
    let n = grid.len();
    let axes = [0, 1, 2].map(|d| {
        if grid.counts()[d] < 2 {
            return AxisFaces::zeros(n);
        }
        let v: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|c| {
                if is_interior_lower_face(grid, c, d) {
                    spec.velocity_unchecked(theta, lower_face_center(grid, c, d))[d]
                } else {
                    0.0
                }
            })
            .collect();
        AxisFaces::from_raw(v)
    });
    Ok(FaceVelocities { axes })
}

/// Fixed sparsity pattern of the 7-point upwind stencil (structural zeros
/// included) so that every operator on a grid shares one symbolic
/// factorisation.
fn stencil_pattern(grid: &Grid3) -> (Vec<usize>, Vec<usize>) {
    let n = grid.len();
    let counts = grid.counts();
    let strides = grid.strides();
    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx = Vec::with_capacity(7 * n);
    col_ptr.push(0);
    for c in 0..n {
        let ijk = grid.coords(c);
        for d in (0..3).rev() {
            if ijk[d] > 0 {
                row_idx.push(c - strides[d]);
            }
        }
        row_idx.push(c);
        for d in 0..3 {
            if ijk[d] + 1 < counts[d] {
                row_idx.push(c + strides[d]);
            }
        }
        col_ptr.push(row_idx.len());
    }
    (col_ptr, row_idx)
}

/// Assemble `Σ_d (1/Δx_d) K_d` from per-axis split face values. Used both for
/// `K` (with `v⁺, v⁻`) and for `∂θK` (with `∂v⁺, ∂v⁻`).
fn assemble_split(plus: [&[f64]; 3], minus: [&[f64]; 3], grid: &Grid3) -> CscMatrix {
    let n = grid.len();
    let counts = grid.counts();
    let strides = grid.strides();
    let inv_dx = grid.spacing().map(|h| 1.0 / h);
    let (col_ptr, row_idx) = stencil_pattern(grid);

    let columns: Vec<([f64; 7], usize)> = (0..n)
        .into_par_iter()
        .map(|c| {
            let ijk = grid.coords(c);
            let mut vals = [0.0; 7];
            let mut len = 0;
            let mut diag = 0.0;
            // Sub-diagonal-side neighbours (rows c − s_d), descending d.
            for d in (0..3).rev() {
                if ijk[d] > 0 {
                    vals[len] = -minus[d][c] * inv_dx[d];
                    len += 1;
                }
            }
            let diag_slot = len;
            len += 1;
            for d in 0..3 {
                let upper_plus = if ijk[d] + 1 < counts[d] {
                    plus[d][c + strides[d]]
                } else {
                    0.0
                };
                diag += (minus[d][c] - upper_plus) * inv_dx[d];
                if ijk[d] + 1 < counts[d] {
                    vals[len] = upper_plus * inv_dx[d];
                    len += 1;
                }
            }
            vals[diag_slot] = diag;
            (vals, len)
        })
        .collect();

    let mut values = Vec::with_capacity(row_idx.len());
    for (vals, len) in &columns {
        values.extend_from_slice(&vals[..*len]);
    }
    CscMatrix::from_parts(n, col_ptr, row_idx, values)
}

/// The assembled upwind operator `K_mat` together with the grid and
/// parameter snapshot it was built for.
#[derive(Debug, Clone)]
pub struct UpwindOperator {
    pub grid: Grid3,
    pub matrix: CscMatrix,
    pub theta: Vec<f64>,
}

impl UpwindOperator {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Largest `|column sum|` relative to the largest entry magnitude.
    pub fn max_relative_column_sum(&self) -> f64 {
        let scale = self
            .matrix
            .values()
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        self.matrix
            .column_sums()
            .iter()
            .fold(0.0_f64, |m, s| m.max(s.abs()))
            / scale
    }
}

pub fn assemble_k(faces: &FaceVelocities, grid: &Grid3, theta: &[f64]) -> UpwindOperator {
    let plus = faces.axes.each_ref().map(|a| a.plus.as_slice());
    let minus = faces.axes.each_ref().map(|a| a.minus.as_slice());
    UpwindOperator {
        grid: grid.clone(),
        matrix: assemble_split(plus, minus, grid),
        theta: theta.to_vec(),
    }
}

/// Convenience: face velocities followed by assembly.
pub fn assemble_for(spec: &SystemSpec, theta: &[f64], grid: &Grid3) -> Result<UpwindOperator> {
    let faces = face_velocities(spec, theta, grid)?;
    Ok(assemble_k(&faces, grid, theta))
}

/// `c = safety / Σ_d (2/Δx_d)·max|v_d|`, the largest scaling for which every
/// diagonal entry of `I + cK` is guaranteed nonnegative. `None` when the
/// velocity vanishes on every face (then `K = 0` and any `c` works).
pub fn cfl_constant(faces: &FaceVelocities, grid: &Grid3, safety: f64) -> Result<Option<f64>> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::invalid(format!("CFL safety {safety} must lie in (0, 1]")));
    }
    let h = grid.spacing();
    let denom: f64 = faces
        .max_abs()
        .iter()
        .zip(h)
        .map(|(vmax, dx)| 2.0 * vmax / dx)
        .sum();
    if denom == 0.0 {
        return Ok(None);
    }
    Ok(Some(safety / denom))
}

/// One CFL constant valid for every parameter vector in `thetas`.
pub fn cfl_constant_for_all(
    spec: &SystemSpec,
    thetas: &[Vec<f64>],
    grid: &Grid3,
    safety: f64,
) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for theta in thetas {
        let faces = face_velocities(spec, theta, grid)?;
        if let Some(c) = cfl_constant(&faces, grid, safety)? {
            best = Some(best.map_or(c, |b| b.min(c)));
        }
    }
    Ok(best)
}

/// Corners of a parameter box, for bounding face speeds over the box. The
/// built-in systems are linear (or monotone-linear) in θ, so `|v|` peaks at a
/// corner.
pub fn box_corners(bounds: &[Interval]) -> Vec<Vec<f64>> {
    let m = bounds.len();
    (0..1usize << m)
        .map(|mask| {
            (0..m)
                .map(|k| if mask >> k & 1 == 1 { bounds[k].hi } else { bounds[k].lo })
                .collect()
        })
        .collect()
}

/// Smallest diagonal entry of `I + cK`; errors if it is negative.
pub fn verify_cfl(k: &UpwindOperator, c: f64) -> Result<f64> {
    let min_diag = k
        .matrix
        .diagonal()
        .iter()
        .map(|d| 1.0 + c * d)
        .fold(f64::INFINITY, f64::min);
    if min_diag < -1e-14 {
        return Err(Error::CflViolation {
            min_diagonal: min_diag,
        });
    }
    Ok(min_diag)
}

/// Heaviside used for `∂v⁺/∂v`: exact step (with `H(0) = 1/2`) when
/// `k_smooth == 0`, otherwise the logistic `1/(1 + e^{−v/k})`.
pub fn heaviside(v: f64, k_smooth: f64) -> f64 {
    if k_smooth > 0.0 {
        1.0 / (1.0 + (-v / k_smooth).exp())
    } else if v > 0.0 {
        1.0
    } else if v < 0.0 {
        0.0
    } else {
        0.5
    }
}

/// `∂K/∂θ_k` for every parameter. Shares the sparsity pattern of `K`; face
/// derivatives are split as `∂v⁺ = H(v)∂v`, `∂v⁻ = (1 − H(v))∂v`.
pub fn assemble_dk(
    spec: &SystemSpec,
    theta: &[f64],
    grid: &Grid3,
    k_smooth: f64,
) -> Result<Vec<UpwindOperator>> {
    if !(k_smooth >= 0.0 && k_smooth.is_finite()) {
        return Err(Error::invalid(format!("k_smooth {k_smooth} must be >= 0")));
    }
    spec.velocity(theta, [0.0; 3])?;
    let m = spec.arity();
    let n = grid.len();

    // per axis: (dplus, dminus), each m × n flattened as [k * n + c]
    let split: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
        .map(|d| {
            let mut dplus = vec![0.0; m * n];
            let mut dminus = vec![0.0; m * n];
            if grid.counts()[d] < 2 {
                return (dplus, dminus);
            }
            let per_cell: Vec<Vec<(f64, f64)>> = (0..n)
                .into_par_iter()
                .map(|c| {
                    if !is_interior_lower_face(grid, c, d) {
                        return vec![(0.0, 0.0); m];
                    }
                    let p = lower_face_center(grid, c, d);
                    let v = spec.velocity_unchecked(theta, p)[d];
                    let h = heaviside(v, k_smooth);
                    let mut jac = vec![[0.0; 3]; m];
                    spec.param_jacobian_unchecked(theta, p, &mut jac);
                    jac.iter().map(|row| (h * row[d], (1.0 - h) * row[d])).collect()
                })
                .collect();
            for (c, rows) in per_cell.iter().enumerate() {
                for (k, &(dp, dm)) in rows.iter().enumerate() {
                    dplus[k * n + c] = dp;
                    dminus[k * n + c] = dm;
                }
            }
            (dplus, dminus)
        })
        .collect();

    Ok((0..m)
        .map(|k| {
            let r = k * n..(k + 1) * n;
            let plus = [0, 1, 2].map(|d| &split[d].0[r.clone()]);
            let minus = [0, 1, 2].map(|d| &split[d].1[r.clone()]);
            UpwindOperator {
                grid: grid.clone(),
                matrix: assemble_split(plus, minus, grid),
                theta: theta.to_vec(),
            }
        })
        .collect())
}

#[cfg(test)]
pub(crate) mod test_support {
    use std::sync::Arc;

    use crate::dynamics::{FnField, Interval, SystemSpec};

    /// Constant velocity along x, scaled by the single parameter.
    pub fn constant_x_flow() -> SystemSpec {
        let field = FnField::new(
            1,
            |theta: &[f64], _| [theta[0], 0.0, 0.0],
            |_: &[f64], _, out: &mut [[f64; 3]]| out[0] = [1.0, 0.0, 0.0],
        );
        let dom = [Interval { lo: -10.0, hi: 10.0 }; 3];
        SystemSpec::custom(vec!["speed".into()], dom, Arc::new(field)).unwrap()
    }

    pub fn zero_flow() -> SystemSpec {
        let field = FnField::new(
            1,
            |_: &[f64], _| [0.0; 3],
            |_: &[f64], _, out: &mut [[f64; 3]]| out[0] = [0.0; 3],
        );
        let dom = [Interval { lo: -10.0, hi: 10.0 }; 3];
        SystemSpec::custom(vec!["unused".into()], dom, Arc::new(field)).unwrap()
    }
}
