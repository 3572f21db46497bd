//! Earth mover's distance between equal-size clouds as an optimal
//! assignment, solved exactly (Hungarian) or by an auction with
//! ε-scaling and a certified duality gap.

use crate::error::{Error, Result};
use crate::geom::{self, Point3};

/// Largest cloud accepted by the exact solver.
pub const EXACT_LIMIT: usize = 512;
/// Relative duality gap the auction stops at.
pub const AUCTION_GAP: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmdMode {
    Exact,
    Approximate,
}

/// Assignment cost and, for the auction, a certified relative gap
/// `(primal - dual) / primal` (zero for the exact solver).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmdResult {
    pub value: f64,
    pub gap: f64,
}

fn cost_matrix(a: &[Point3], b: &[Point3]) -> Vec<f64> {
    let n = a.len();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = geom::dist2(a[i], b[j]).sqrt();
        }
    }
    c
}

/// Minimum-cost perfect matching on an `n x n` row-major cost matrix.
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // Shortest augmenting path with potentials, 1-based with a sentinel
    // column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Auction assignment with ε-scaling. Returns the assignment and the
/// certified relative gap against the dual bound.
pub fn auction(cost: &[f64], n: usize, target_gap: f64) -> (Vec<usize>, f64) {
    let max_c = cost.iter().copied().fold(0.0, f64::max);
    if n == 0 || max_c == 0.0 {
        return ((0..n).collect(), 0.0);
    }
    let mut prices = vec![0.0; n];
    let mut eps = max_c / 4.0;
    let floor = max_c * 1e-12;
    loop {
        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut assigned: Vec<Option<usize>> = vec![None; n];
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            // benefit of object j for bidder i is -cost - price
            let (mut best, mut second, mut best_j) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
            for j in 0..n {
                let val = -cost[i * n + j] - prices[j];
                if val > best {
                    second = best;
                    best = val;
                    best_j = j;
                } else if val > second {
                    second = val;
                }
            }
            let incr = if second.is_finite() { best - second } else { 0.0 } + eps;
            prices[best_j] += incr;
            if let Some(prev) = owner[best_j].replace(i) {
                assigned[prev] = None;
                queue.push(prev);
            }
            assigned[i] = Some(best_j);
        }
        let assignment: Vec<usize> = assigned.into_iter().map(|a| a.expect("auction leaves no bidder unassigned")).collect();
        let primal: f64 = (0..n).map(|i| cost[i * n + assignment[i]]).sum();
        // u_i = max_j (-c_ij - p_j) gives a feasible dual; -(sum u + sum p)
        // bounds the optimum from below.
        let dual = -(0..n)
            .map(|i| (0..n).map(|j| -cost[i * n + j] - prices[j]).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            - prices.iter().sum::<f64>();
        let gap = if primal > 0.0 { ((primal - dual) / primal).max(0.0) } else { 0.0 };
        if gap <= target_gap || eps <= floor {
            return (assignment, gap);
        }
        eps /= 5.0;
    }
}

pub fn emd_points(a: &[Point3], b: &[Point3], mode: EmdMode) -> Result<EmdResult> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "EMD needs equal-size clouds, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::Parameter("EMD of empty clouds".into()));
    }
    let cost = cost_matrix(a, b);
    let (assignment, gap) = match mode {
        EmdMode::Exact => {
            if n > EXACT_LIMIT {
                return Err(Error::Parameter(format!(
                    "exact EMD is limited to {EXACT_LIMIT} points, got {n}"
                )));
            }
            (hungarian(&cost, n), 0.0)
        }
        EmdMode::Approximate => auction(&cost, n, AUCTION_GAP),
    };
    let total: f64 = (0..n).map(|i| cost[i * n + assignment[i]]).sum();
    Ok(EmdResult {
        value: total / n as f64,
        gap,
    })
}
