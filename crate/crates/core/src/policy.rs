//! Decision rules and pathwise continuation values.

use ndarray::{Array2, ArrayView2};

use crate::contract::ContractSpec;
use crate::error::{Error, Result};
use crate::market::{PathBatch, StateProcess};
use crate::volume::QGrid;

/// A bang-bang rule: for a state at date `k` and a non-trivial level `Q`,
/// `true` selects `q_k^+(Q)` and `false` selects `q_k^-(Q)`.
///
/// Trivial levels never reach the rule; callers apply the forced branch.
pub trait DecisionPolicy: Send + Sync {
    /// Decision for every row at every listed level (`M x levels.len()`).
    fn decide_levels(
        &self,
        k: usize,
        states: ArrayView2<f64>,
        spots: &[f64],
        levels: &[i64],
    ) -> Result<Array2<bool>>;

    /// Decision for row `m` at its own level `levels[m]`.
    fn decide(
        &self,
        k: usize,
        states: ArrayView2<f64>,
        spots: &[f64],
        levels: &[i64],
    ) -> Result<Vec<bool>>;
}

/// Pathwise `v_j(s_j, Q)` for every `Q ∈ Q_j` and every path of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationTable {
    date: usize,
    lo: i64,
    values: Array2<f64>,
}

impl ContinuationTable {
    /// `v_n = g_n` pathwise.
    pub fn terminal(contract: &ContractSpec, grid: &QGrid, spots_n: &[f64]) -> Self {
        let n = grid.n_dates();
        let (lo, hi) = grid.bounds(n);
        let width = (hi - lo + 1) as usize;
        let mut values = Array2::zeros((spots_n.len(), width));
        for (m, s) in spots_n.iter().enumerate() {
            for (j, q) in (lo..=hi).enumerate() {
                values[[m, j]] = contract.terminal_value(*s, q);
            }
        }
        Self {
            date: n,
            lo,
            values,
        }
    }

    pub fn date(&self) -> usize {
        self.date
    }

    pub fn n_paths(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// `v_date(s^{[m]}, level)`.
    pub fn value(&self, m: usize, level: i64) -> Result<f64> {
        let j = level - self.lo;
        if j < 0 || j as usize >= self.values.ncols() {
            return Err(Error::Domain {
                date: self.date,
                level,
            });
        }
        Ok(self.values[[m, j as usize]])
    }

    fn column(&self, level: i64) -> Result<usize> {
        let j = level - self.lo;
        if j < 0 || j as usize >= self.values.ncols() {
            Err(Error::Usage(format!(
                "continuation table at date {} has no entry for level {level}",
                self.date
            )))
        } else {
            Ok(j as usize)
        }
    }

    /// `v_k = c_k(s_k, q*) + v_{k+1}(s_{k+1}, Q + q*)` with `k = date - 1`
    /// and `q*` chosen by `policy` (forced on trivial levels).
    pub fn step_back(
        &self,
        contract: &ContractSpec,
        grid: &QGrid,
        policy: &dyn DecisionPolicy,
        states_k: ArrayView2<f64>,
        spots_k: &[f64],
    ) -> Result<Self> {
        if self.date == 0 {
            return Err(Error::Usage("cannot step back from date 0".into()));
        }
        let k = self.date - 1;
        if states_k.nrows() != self.n_paths() || spots_k.len() != self.n_paths() {
            return Err(Error::Usage("state batch does not match the table".into()));
        }
        let tasks = grid.tasks(k);
        let decisions = if tasks.is_empty() {
            None
        } else {
            Some(policy.decide_levels(k, states_k, spots_k, &tasks)?)
        };
        let (lo, hi) = grid.bounds(k);
        let mut values = Array2::zeros((self.n_paths(), (hi - lo + 1) as usize));
        let mut task = 0;
        for (j, level) in (lo..=hi).enumerate() {
            let (q_lo, q_hi) = grid.admissible(k, level)?;
            let (c_lo, c_hi) = (self.column(level + q_lo)?, self.column(level + q_hi)?);
            let column = if q_lo == q_hi {
                None
            } else {
                task += 1;
                Some(task - 1)
            };
            for (m, s) in spots_k.iter().enumerate() {
                let upper = match (column, &decisions) {
                    (Some(t), Some(d)) => d[[m, t]],
                    _ => false,
                };
                let (q, c) = if upper { (q_hi, c_hi) } else { (q_lo, c_lo) };
                values[[m, j]] = contract.immediate_reward(*s, q) + self.values[[m, c]];
            }
        }
        Ok(Self {
            date: k,
            lo,
            values,
        })
    }

    /// `(ψ⁺, ψ⁻)` at date `date - 1` for the given levels (`M x levels.len()`).
    pub fn branch_payoffs(
        &self,
        contract: &ContractSpec,
        grid: &QGrid,
        spots_k: &[f64],
        levels: &[i64],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let rows: Vec<usize> = (0..self.n_paths()).collect();
        self.branch_payoffs_rows(contract, grid, spots_k, levels, &rows)
    }

    /// Same as [`Self::branch_payoffs`] restricted to table rows `rows`;
    /// `spots_k[i]` is the spot of path `rows[i]`.
    pub fn branch_payoffs_rows(
        &self,
        contract: &ContractSpec,
        grid: &QGrid,
        spots_k: &[f64],
        levels: &[i64],
        rows: &[usize],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if self.date == 0 {
            return Err(Error::Usage("no decision precedes date 0".into()));
        }
        let k = self.date - 1;
        let mut plus = Array2::zeros((rows.len(), levels.len()));
        let mut minus = Array2::zeros((rows.len(), levels.len()));
        for (i, level) in levels.iter().enumerate() {
            let (q_lo, q_hi) = grid.admissible(k, *level)?;
            let (c_lo, c_hi) = (self.column(level + q_lo)?, self.column(level + q_hi)?);
            for (r, &m) in rows.iter().enumerate() {
                let s = spots_k[r];
                plus[[r, i]] = contract.immediate_reward(s, q_hi) + self.values[[m, c_hi]];
                minus[[r, i]] = contract.immediate_reward(s, q_lo) + self.values[[m, c_lo]];
            }
        }
        Ok((plus, minus))
    }
}

/// Continuation values `v_{k+1}` on `paths`, rolled back from maturity with
/// the frozen rules of dates `k+1..n`.
pub fn continuation_table(
    process: &dyn StateProcess,
    contract: &ContractSpec,
    grid: &QGrid,
    policy: &dyn DecisionPolicy,
    paths: &PathBatch,
    k: usize,
) -> Result<ContinuationTable> {
    let n = grid.n_dates();
    if k >= n || paths.k_start() > k + 1 || paths.last_date() != n {
        return Err(Error::Usage(format!(
            "paths cover dates {}..={}, need {}..={n}",
            paths.k_start(),
            paths.last_date(),
            k + 1
        )));
    }
    let mut table = ContinuationTable::terminal(contract, grid, &process.spots(n, paths.states(n)));
    for j in (k + 1..n).rev() {
        let states = paths.states(j);
        let spots = process.spots(j, states);
        table = table.step_back(contract, grid, policy, states, &spots)?;
    }
    Ok(table)
}

/// Rule given by a plain function of `(date, spot, level)`. Handy for
/// reference strategies such as "buy the maximum whenever `S > K`".
pub struct SpotRule<F>(pub F);

impl<F> DecisionPolicy for SpotRule<F>
where
    F: Fn(usize, f64, i64) -> bool + Send + Sync,
{
    fn decide_levels(
        &self,
        k: usize,
        _states: ArrayView2<f64>,
        spots: &[f64],
        levels: &[i64],
    ) -> Result<Array2<bool>> {
        Ok(Array2::from_shape_fn((spots.len(), levels.len()), |(m, i)| {
            (self.0)(k, spots[m], levels[i])
        }))
    }

    fn decide(
        &self,
        k: usize,
        _states: ArrayView2<f64>,
        spots: &[f64],
        levels: &[i64],
    ) -> Result<Vec<bool>> {
        Ok(spots
            .iter()
            .zip(levels)
            .map(|(s, q)| (self.0)(k, *s, *q))
            .collect())
    }
}
