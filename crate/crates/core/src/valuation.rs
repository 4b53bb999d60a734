//! Forward Monte Carlo valuation of a decision rule.

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contract::ContractSpec;
use crate::error::{Error, Result};
use crate::market::{PathBatch, StateProcess};
use crate::policy::DecisionPolicy;
use crate::volume::QGrid;

pub const CHUNK_PATHS: usize = 4096;
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuationResult {
    pub price: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub paths: usize,
    pub seed: u64,
    /// Smallest and largest terminal cumulative volume over all paths.
    pub min_final_volume: i64,
    pub max_final_volume: i64,
}

/// Mean and centered second moment of a set of payoffs.
#[derive(Debug, Clone, Copy)]
struct Moments {
    count: usize,
    mean: f64,
    m2: f64,
    min_q: i64,
    max_q: i64,
}

impl Moments {
    fn from_samples(values: &[f64], final_volumes: &[i64]) -> Self {
        let count = values.len();
        let mean = neumaier_sum(values) / count as f64;
        let m2 = neumaier_sum(&values.iter().map(|v| (v - mean) * (v - mean)).collect::<Vec<_>>());
        Self {
            count,
            mean,
            m2,
            min_q: *final_volumes.iter().min().unwrap(),
            max_q: *final_volumes.iter().max().unwrap(),
        }
    }

    /// Pairwise combination of two disjoint samples.
    fn merge(self, other: Self) -> Self {
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let w = other.count as f64 / count as f64;
        Self {
            count,
            mean: self.mean + delta * w,
            m2: self.m2 + other.m2 + delta * delta * self.count as f64 * w,
            min_q: self.min_q.min(other.min_q),
            max_q: self.max_q.max(other.max_q),
        }
    }
}

fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Pathwise payoffs `Σ_k c_k(s_k, q_k*) + g_n(s_n, Q_n)` and terminal
/// volumes of `policy` on a path batch starting at date 0.
pub fn path_payoffs(
    policy: &dyn DecisionPolicy,
    process: &dyn StateProcess,
    contract: &ContractSpec,
    grid: &QGrid,
    paths: &PathBatch,
) -> Result<(Vec<f64>, Vec<i64>)> {
    let n = grid.n_dates();
    if paths.k_start() != 0 || paths.last_date() != n {
        return Err(Error::Usage("valuation paths must span dates 0..=n".into()));
    }
    let count = paths.n_paths();
    let mut level = vec![0i64; count];
    let mut payoff = vec![0.0; count];
    for k in 0..n {
        let states = paths.states(k);
        let spots = process.spots(k, states);
        let mut rows = Vec::new();
        let mut bounds = Vec::with_capacity(count);
        for m in 0..count {
            let (lo, hi) = grid.admissible(k, level[m])?;
            if lo != hi {
                rows.push(m);
            }
            bounds.push((lo, hi));
        }
        let mut upper = vec![false; count];
        if !rows.is_empty() {
            let sub_states = states.select(Axis(0), &rows);
            let sub_spots: Vec<f64> = rows.iter().map(|m| spots[*m]).collect();
            let sub_levels: Vec<i64> = rows.iter().map(|m| level[*m]).collect();
            let decided = policy.decide(k, sub_states.view(), &sub_spots, &sub_levels)?;
            for (m, d) in rows.iter().zip(decided) {
                upper[*m] = d;
            }
        }
        for m in 0..count {
            let (lo, hi) = bounds[m];
            let q = lo + (hi - lo) * upper[m] as i64;
            payoff[m] += contract.immediate_reward(spots[m], q);
            level[m] += q;
        }
    }
    let spots = process.spots(n, paths.states(n));
    for m in 0..count {
        payoff[m] += contract.terminal_value(spots[m], level[m]);
    }
    Ok((payoff, level))
}

fn summarize(moments: Moments, seed: u64) -> ValuationResult {
    let var = if moments.count > 1 {
        moments.m2 / (moments.count - 1) as f64
    } else {
        0.0
    };
    let stderr = (var / moments.count as f64).sqrt();
    ValuationResult {
        price: moments.mean,
        stderr,
        ci_low: moments.mean - Z_95 * stderr,
        ci_high: moments.mean + Z_95 * stderr,
        paths: moments.count,
        seed,
        min_final_volume: moments.min_q,
        max_final_volume: moments.max_q,
    }
}

/// Value `policy` on an existing batch (validation snapshots).
pub fn evaluate_on_paths(
    policy: &dyn DecisionPolicy,
    process: &dyn StateProcess,
    contract: &ContractSpec,
    grid: &QGrid,
    paths: &PathBatch,
    seed: u64,
) -> Result<ValuationResult> {
    let (payoff, levels) = path_payoffs(policy, process, contract, grid, paths)?;
    Ok(summarize(Moments::from_samples(&payoff, &levels), seed))
}

/// Price `policy` on `paths` fresh paths from `seed`. Paths are simulated in
/// fixed chunks, valued in parallel and reduced in chunk order, so the
/// result does not depend on the thread count.
pub fn evaluate_policy(
    policy: &dyn DecisionPolicy,
    process: &dyn StateProcess,
    contract: &ContractSpec,
    grid: &QGrid,
    paths: usize,
    seed: u64,
) -> Result<ValuationResult> {
    if paths == 0 {
        return Err(Error::Usage("valuation needs at least one path".into()));
    }
    if process.n_dates() != grid.n_dates() {
        return Err(Error::Usage(format!(
            "model has {} dates, contract has {}",
            process.n_dates(),
            grid.n_dates()
        )));
    }
    let chunks = paths.div_ceil(CHUNK_PATHS);
    let parts: Vec<Result<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let first = c * CHUNK_PATHS;
            let count = CHUNK_PATHS.min(paths - first);
            let batch = process.fill_paths(seed, first as u64, count, 0)?;
            let (payoff, levels) = path_payoffs(policy, process, contract, grid, &batch)?;
            Ok(Moments::from_samples(&payoff, &levels))
        })
        .collect();
    let mut total: Option<Moments> = None;
    for part in parts {
        let part = part?;
        total = Some(match total {
            None => part,
            Some(t) => t.merge(part),
        });
    }
    Ok(summarize(total.expect("at least one chunk"), seed))
}
