//! Per-axis line transforms over x-fastest grid vectors.

use rayon::prelude::*;

/// Below this many cells the line passes run serially.
const PAR_THRESHOLD: usize = 4096;

/// Apply `f(line_in, line_out)` to every grid line along `axis`.
pub(crate) fn map_lines<F>(counts: [usize; 3], axis: usize, data: &[f64], f: F) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let len = counts[axis];
    let inner: usize = counts[..axis].iter().product();
    let outer = data.len() / (len * inner);
    let line = |id: usize| {
        let (o, io) = (id / inner, id % inner);
        let base = o * len * inner + io;
        let input: Vec<f64> = (0..len).map(|a| data[base + a * inner]).collect();
        let mut out = vec![0.0; len];
        f(&input, &mut out);
        out
    };
    let lines: Vec<Vec<f64>> = if data.len() >= PAR_THRESHOLD {
        (0..outer * inner).into_par_iter().with_min_len(8).map(line).collect()
    } else {
        (0..outer * inner).map(line).collect()
    };
    let mut result = vec![0.0; data.len()];
    for (id, vals) in lines.iter().enumerate() {
        let (o, io) = (id / inner, id % inner);
        let base = o * len * inner + io;
        for (a, v) in vals.iter().enumerate() {
            result[base + a * inner] = *v;
        }
    }
    result
}

/// Per-axis tables for the 1-D Gibbs kernel at offset `k`:
/// `scaled[k] = (kΔ)²/η`, `kernel[k] = exp(−scaled[k])`.
#[derive(Debug, Clone)]
pub(crate) struct AxisKernel {
    pub scaled: Vec<f64>,
    pub kernel: Vec<f64>,
}

impl AxisKernel {
    pub fn new(len: usize, dx: f64, eta: f64) -> Self {
        let scaled: Vec<f64> = (0..len).map(|k| (k as f64 * dx).powi(2) / eta).collect();
        let kernel = scaled.iter().map(|s| (-s).exp()).collect();
        AxisKernel { scaled, kernel }
    }

    /// Kernel multiplied by the 1-D cost: `(kΔ)²·exp(−(kΔ)²/η)`.
    pub fn cost_weighted(len: usize, dx: f64, eta: f64) -> Self {
        let base = Self::new(len, dx, eta);
        let c: Vec<f64> = (0..len).map(|k| (k as f64 * dx).powi(2)).collect();
        let scaled = base
            .scaled
            .iter()
            .zip(&c)
            .map(|(s, ck)| if *ck > 0.0 { s - ck.ln() } else { f64::INFINITY })
            .collect();
        let kernel = base.kernel.iter().zip(&c).map(|(k, ck)| k * ck).collect();
        AxisKernel { scaled, kernel }
    }
}

/// `out[a] = log Σ_b exp(w[b] − (a−b)²Δ²/η)`.
///
/// Scales by the line maximum and uses the precomputed kernel; entries whose
/// scaled sum underflows are recomputed with an exact log-sum-exp.
pub(crate) fn log_convolve(w: &[f64], out: &mut [f64], k: &AxisKernel) {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        out.fill(f64::NEG_INFINITY);
        return;
    }
    let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
    let n = w.len();
    for a in 0..n {
        let mut s = 0.0;
        for (b, eb) in e.iter().enumerate() {
            s += k.kernel[a.abs_diff(b)] * eb;
        }
        out[a] = if s > 1e-280 {
            m + s.ln()
        } else {
            log_sum_exp((0..n).map(|b| w[b] - k.scaled[a.abs_diff(b)]))
        };
    }
}

/// `out[a] = min_b (w[b] + (a−b)²Δ²)`
pub(crate) fn min_plus_quadratic(w: &[f64], out: &mut [f64], dx: f64) {
    let n = w.len();
    for (a, o) in out.iter_mut().enumerate() {
        let mut best = f64::INFINITY;
        for (b, wb) in w.iter().enumerate() {
            let d = (a as f64 - b as f64) * dx;
            best = best.min(wb + d * d);
        }
        *o = best;
    }
    debug_assert_eq!(out.len(), n);
}

pub(crate) fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_visit_every_axis_in_order() {
        let counts = [3, 2, 2];
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        // Reverse each line; applying twice is the identity.
        let rev = |i: &[f64], o: &mut [f64]| {
            for (a, v) in i.iter().rev().enumerate() {
                o[a] = *v;
            }
        };
        let once = map_lines(counts, 1, &data, rev);
        assert_eq!(once[0], 3.0);
        assert_eq!(once[3], 0.0);
        assert_eq!(map_lines(counts, 1, &once, rev), data);
        let z = map_lines(counts, 2, &data, rev);
        assert_eq!(z[0], 6.0);
    }

    #[test]
    fn log_convolution_matches_direct_sum() {
        let w = [-3.0, 0.5, 2.0, -700.0, 1.0];
        let k = AxisKernel::new(5, 0.7, 0.05);
        let mut out = [0.0; 5];
        log_convolve(&w, &mut out, &k);
        for a in 0..5 {
            let direct = log_sum_exp((0..5).map(|b| w[b] - ((a as f64 - b as f64) * 0.7).powi(2) / 0.05));
            assert!((out[a] - direct).abs() < 1e-12, "{a}: {} vs {direct}", out[a]);
        }
    }

    #[test]
    fn tiny_eta_takes_exact_branch() {
        let w = [0.0, -1e4, -1e4];
        let k = AxisKernel::new(3, 1.0, 1e-3);
        let mut out = [0.0; 3];
        log_convolve(&w, &mut out, &k);
        assert!((out[2] - (-4000.0)).abs() < 1e-9);
    }

    #[test]
    fn weighted_kernel_matches_direct_sum() {
        let w = [0.3, -1.0, 2.0, 0.0];
        let k = AxisKernel::cost_weighted(4, 0.5, 0.2);
        let mut out = [0.0; 4];
        log_convolve(&w, &mut out, &k);
        for a in 0..4 {
            let direct: f64 = (0..4)
                .map(|b| {
                    let c = ((a as f64 - b as f64) * 0.5).powi(2);
                    c * (w[b] - c / 0.2).exp()
                })
                .sum();
            assert!((out[a].exp() - direct).abs() < 1e-12 * direct.max(1.0));
        }
    }

    #[test]
    fn min_plus_of_zero_is_zero() {
        let mut out = [1.0; 4];
        min_plus_quadratic(&[0.0; 4], &mut out, 0.3);
        assert_eq!(out, [0.0; 4]);
    }
}
