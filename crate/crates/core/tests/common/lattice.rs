//! Backward induction on a trinomial factor lattice.

use ndarray::Array2;
use swingnet::policy::DecisionPolicy;
use swingnet::{ContractSpec, QGrid, StateProcess, TrinomialFactor};

fn spot(tree: &TrinomialFactor, k: usize, j: i64) -> f64 {
    tree.spot(k, ndarray::arr1(&[tree.node_value(k, j)]).view())
}

/// Expected `next[·, level]` over the three branches of node `j` at date `k`.
fn expectation(tree: &TrinomialFactor, k: usize, j: i64, next: &[Vec<f64>], next_lo: i64, col: usize) -> f64 {
    tree.branches(k, j)
        .iter()
        .map(|b| b.prob * next[(b.node - next_lo) as usize][col])
        .sum()
}

/// Optimal value over every admissible integer purchase sequence. Levels
/// run over `0..=n q̄`; a purchase is admissible when the firm global bounds
/// can still be met with the remaining dates.
pub fn optimal_value(tree: &TrinomialFactor, contract: &ContractSpec) -> f64 {
    let v = contract.volume;
    let n = v.n;
    let top = n as i64 * v.q_max;
    let feasible = |k: usize, level: i64| {
        if !v.firm {
            return true;
        }
        let rest = (n - k) as i64;
        level + rest * v.q_min <= v.total_max && level + rest * v.q_max >= v.total_min
    };
    let (lo, hi) = tree.node_range(n);
    let mut next: Vec<Vec<f64>> = (lo..=hi)
        .map(|j| (0..=top).map(|q| contract.terminal_value(spot(tree, n, j), q)).collect())
        .collect();
    let mut next_lo = lo;
    for k in (0..n).rev() {
        let (lo, hi) = tree.node_range(k);
        let mut cur = Vec::new();
        for j in lo..=hi {
            let s = spot(tree, k, j);
            let row: Vec<f64> = (0..=top)
                .map(|level| {
                    (v.q_min..=v.q_max)
                        .filter(|q| level + q <= top && feasible(k + 1, level + q))
                        .map(|q| {
                            contract.immediate_reward(s, q)
                                + expectation(tree, k, j, &next, next_lo, (level + q) as usize)
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            cur.push(row);
        }
        next = cur;
        next_lo = lo;
    }
    next[0][0]
}

/// Exact lattice value of a bang-bang policy (no Monte Carlo error).
pub fn policy_value(tree: &TrinomialFactor, contract: &ContractSpec, policy: &dyn DecisionPolicy) -> f64 {
    let grid = QGrid::new(contract.volume).unwrap();
    let n = grid.n_dates();
    let (lo_n, hi_n) = grid.bounds(n);
    let (lo, hi) = tree.node_range(n);
    let mut next: Vec<Vec<f64>> = (lo..=hi)
        .map(|j| (lo_n..=hi_n).map(|q| contract.terminal_value(spot(tree, n, j), q)).collect())
        .collect();
    let mut next_lo = lo;
    let mut next_q_lo = lo_n;
    for k in (0..n).rev() {
        let (lo, hi) = tree.node_range(k);
        let (q_lo, q_hi) = grid.bounds(k);
        let states = Array2::from_shape_fn(((hi - lo + 1) as usize, 1), |(r, _)| tree.node_value(k, lo + r as i64));
        let spots: Vec<f64> = (lo..=hi).map(|j| spot(tree, k, j)).collect();
        let tasks = grid.tasks(k);
        let decisions = if tasks.is_empty() {
            None
        } else {
            Some(policy.decide_levels(k, states.view(), &spots, &tasks).unwrap())
        };
        let mut cur = Vec::new();
        for (r, j) in (lo..=hi).enumerate() {
            let row: Vec<f64> = (q_lo..=q_hi)
                .map(|level| {
                    let (a, b) = grid.admissible(k, level).unwrap();
                    let upper = match (&decisions, tasks.binary_search(&level)) {
                        (Some(d), Ok(t)) => d[[r, t]],
                        _ => false,
                    };
                    let q = if upper { b } else { a };
                    contract.immediate_reward(spots[r], q)
                        + expectation(tree, k, j, &next, next_lo, (level + q - next_q_lo) as usize)
                })
                .collect();
            cur.push(row);
        }
        next = cur;
        next_lo = lo;
        next_q_lo = q_lo;
    }
    next[0][0]
}
