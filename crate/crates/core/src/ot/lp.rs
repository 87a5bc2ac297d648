use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Largest number of nonzero source (or target) masses accepted.
pub const LP_SUPPORT_LIMIT: usize = 400;

#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// `(source, target, mass)` with positive mass.
    pub support: Vec<(usize, usize, f64)>,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub cost: f64,
    pub plan: TransportPlan,
    /// Optimal duals; zero-mass rows and columns get their c-transform
    /// values so `u_i + v_j ≤ c_ij` holds everywhere.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
}

/// Exact discrete transport by the transportation simplex method
/// (north-west-corner start, MODI pricing).
pub fn brute_force_lp(mu: &[f64], nu: &[f64], cost: &[Vec<f64>]) -> Result<LpSolution> {
    if cost.len() != mu.len() || cost.iter().any(|row| row.len() != nu.len()) {
        return Err(Error::invalid("cost matrix shape does not match the marginals"));
    }
    for m in mu.iter().chain(nu) {
        if !(m.is_finite() && *m >= 0.0) {
            return Err(Error::invalid(format!("marginal entry {m} is not a nonnegative number")));
        }
    }
    let (sa, sb) = (mu.iter().sum::<f64>(), nu.iter().sum::<f64>());
    if !(sa > 0.0) || (sa - sb).abs() > 1e-12 * sa.max(1.0) {
        return Err(Error::invalid(format!("marginal totals {sa} and {sb} do not match")));
    }
    let rows: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] > 0.0).collect();
    if rows.len() > LP_SUPPORT_LIMIT || cols.len() > LP_SUPPORT_LIMIT {
        return Err(Error::invalid(format!(
            "supports of size {} and {} exceed the limit of {LP_SUPPORT_LIMIT}",
            rows.len(),
            cols.len()
        )));
    }
    let (m, k) = (rows.len(), cols.len());
    let c = |r: usize, s: usize| cost[rows[r]][cols[s]];
    let a: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let mut b: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
    b[k - 1] += a.iter().sum::<f64>() - b.iter().sum::<f64>();

    let mut x = vec![0.0; m * k];
    let mut basic = vec![false; m * k];

    // North-west corner: exactly m + k − 1 basic cells forming a spanning tree.
    {
        let (mut r, mut s) = (0, 0);
        let (mut ra, mut rb) = (a[0], b[0]);
        loop {
            let t = ra.min(rb);
            x[r * k + s] = t;
            basic[r * k + s] = true;
            if r == m - 1 && s == k - 1 {
                break;
            }
            if (ra <= rb && r < m - 1) || s == k - 1 {
                rb -= t;
                r += 1;
                ra = a[r];
            } else {
                ra -= t;
                s += 1;
                rb = b[s];
            }
        }
    }

    let cmax = cost
        .iter()
        .flatten()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    let tol = 1e-12 * cmax;
    let max_iters = 50 * (m + k) * (m + k) + 100;
    let mut iterations = 0;
    let (mut u, mut v);
    loop {
        (u, v) = tree_duals(&basic, m, k, &c);
        let mut best = (-tol, usize::MAX);
        for r in 0..m {
            for s in 0..k {
                if !basic[r * k + s] {
                    let d = c(r, s) - u[r] - v[s];
                    if d < best.0 {
                        best = (d, r * k + s);
                    }
                }
            }
        }
        if best.1 == usize::MAX {
            break;
        }
        iterations += 1;
        if iterations > max_iters {
            return Err(Error::NotConverged {
                solver: "transportation simplex",
                iterations,
                residual: -best.0,
            });
        }
        let (re, se) = (best.1 / k, best.1 % k);
        // Path in the basis tree from column se to row re; its edges alternate
        // −, +, −, … and close the cycle with the entering cell (+).
        let path = tree_path(&basic, m, k, m + se, re);
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (pos, &cell) in path.iter().enumerate() {
            if pos % 2 == 0 && x[cell] < theta {
                theta = x[cell];
                leave = cell;
            }
        }
        for (pos, &cell) in path.iter().enumerate() {
            if pos % 2 == 0 {
                x[cell] -= theta;
            } else {
                x[cell] += theta;
            }
        }
        x[best.1] = theta;
        basic[best.1] = true;
        basic[leave] = false;
        x[leave] = 0.0;
    }

    let mut support = Vec::new();
    let mut row_sums = vec![0.0; mu.len()];
    let mut col_sums = vec![0.0; nu.len()];
    let mut total = 0.0;
    for r in 0..m {
        for s in 0..k {
            let t = x[r * k + s];
            if t > 0.0 {
                support.push((rows[r], cols[s], t));
                row_sums[rows[r]] += t;
                col_sums[cols[s]] += t;
                total += t * c(r, s);
            }
        }
    }

    let mut u_full = vec![f64::NAN; mu.len()];
    let mut v_full = vec![f64::NAN; nu.len()];
    for (r, &i) in rows.iter().enumerate() {
        u_full[i] = u[r];
    }
    for (s, &j) in cols.iter().enumerate() {
        v_full[j] = v[s];
    }
    for j in 0..nu.len() {
        if v_full[j].is_nan() {
            v_full[j] = rows
                .iter()
                .map(|&i| cost[i][j] - u_full[i])
                .fold(f64::INFINITY, f64::min);
        }
    }
    for i in 0..mu.len() {
        if u_full[i].is_nan() {
            u_full[i] = (0..nu.len())
                .map(|j| cost[i][j] - v_full[j])
                .fold(f64::INFINITY, f64::min);
        }
    }
    let dual: f64 = rows.iter().map(|&i| u_full[i] * mu[i]).sum::<f64>()
        + cols.iter().map(|&j| v_full[j] * nu[j]).sum::<f64>();
    if (dual - total).abs() > 1e-9 * total.abs().max(1.0) {
        return Err(Error::Contract(format!(
            "transportation simplex duality gap {:e}",
            dual - total
        )));
    }
    Ok(LpSolution {
        cost: total,
        plan: TransportPlan {
            support,
            row_sums,
            col_sums,
        },
        u: u_full,
        v: v_full,
        iterations,
    })
}

/// Row/column adjacency of the basis tree; nodes `0..m` are rows, `m..m+k`
/// columns, and each edge carries the flat cell index.
fn adjacency(basic: &[bool], m: usize, k: usize) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); m + k];
    for r in 0..m {
        for s in 0..k {
            if basic[r * k + s] {
                adj[r].push((m + s, r * k + s));
                adj[m + s].push((r, r * k + s));
            }
        }
    }
    adj
}

fn tree_duals(
    basic: &[bool],
    m: usize,
    k: usize,
    c: &impl Fn(usize, usize) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let adj = adjacency(basic, m, k);
    let mut pot = vec![f64::NAN; m + k];
    pot[0] = 0.0;
    let mut queue = VecDeque::from([0]);
    while let Some(node) = queue.pop_front() {
        for &(next, cell) in &adj[node] {
            if pot[next].is_nan() {
                pot[next] = c(cell / k, cell % k) - pot[node];
                queue.push_back(next);
            }
        }
    }
    (pot[..m].to_vec(), pot[m..].to_vec())
}

/// Cells along the unique tree path from node `from` to node `to`.
fn tree_path(basic: &[bool], m: usize, k: usize, from: usize, to: usize) -> Vec<usize> {
    let adj = adjacency(basic, m, k);
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; m + k];
    let mut seen = vec![false; m + k];
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(node) = queue.pop_front() {
        if node == to {
            break;
        }
        for &(next, cell) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, cell));
                queue.push_back(next);
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = to;
    while node != from {
        let (prev, cell) = parent[node].expect("basis is a spanning tree");
        cells.push(cell);
        node = prev;
    }
    cells.reverse();
    cells
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn single_cell_to_single_cell() {
        let r = brute_force_lp(&[1.0], &[1.0], &[vec![7.0]]).unwrap();
        assert_eq!(r.cost, 7.0);
        assert_eq!(r.plan.support, vec![(0, 0, 1.0)]);
    }

    #[test]
    fn permutation_assignment() {
        // Anti-diagonal is free, everything else costs 1.
        let n = 5;
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i + j == n - 1 { 0.0 } else { 1.0 }).collect())
            .collect();
        let w = vec![0.2; n];
        let r = brute_force_lp(&w, &w, &cost).unwrap();
        assert!(r.cost.abs() < 1e-15);
    }

    /// Exhaustive search over the vertices is infeasible, so compare with a
    /// 2 × 2 closed form: the plan is fixed by one free mass t.
    #[test]
    fn two_by_two_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let a0: f64 = rng.gen_range(0.05..0.95);
            let b0: f64 = rng.gen_range(0.05..0.95);
            let cost: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.gen_range(0.0..5.0)).collect()).collect();
            let lo = (a0 + b0 - 1.0).max(0.0);
            let hi = a0.min(b0);
            let f = |t: f64| {
                t * cost[0][0] + (a0 - t) * cost[0][1] + (b0 - t) * cost[1][0] + (1.0 - a0 - b0 + t) * cost[1][1]
            };
            let best = f(lo).min(f(hi));
            let r = brute_force_lp(&[a0, 1.0 - a0], &[b0, 1.0 - b0], &cost).unwrap();
            assert!((r.cost - best).abs() < 1e-12, "{} vs {best}", r.cost);
        }
    }

    #[test]
    fn plan_marginals_and_dual_feasibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let mut mu: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut nu: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() }).collect();
        let (sa, sb) = (mu.iter().sum::<f64>(), nu.iter().sum::<f64>());
        mu.iter_mut().for_each(|v| *v /= sa);
        nu.iter_mut().for_each(|v| *v /= sb);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
        let r = brute_force_lp(&mu, &nu, &cost).unwrap();
        for i in 0..n {
            assert!((r.plan.row_sums[i] - mu[i]).abs() < 1e-12);
            assert!((r.plan.col_sums[i] - nu[i]).abs() < 1e-12);
            for j in 0..n {
                assert!(r.u[i] + r.v[j] <= cost[i][j] + 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(brute_force_lp(&[0.5, 0.5], &[1.0], &[vec![1.0], vec![1.0]]).is_ok());
        assert!(brute_force_lp(&[0.6, 0.5], &[1.0], &[vec![1.0], vec![1.0]]).is_err());
        assert!(brute_force_lp(&[1.0], &[1.0], &[vec![1.0, 2.0]]).is_err());
        assert!(brute_force_lp(&[-1.0, 2.0], &[1.0], &[vec![1.0], vec![1.0]]).is_err());
    }
}
