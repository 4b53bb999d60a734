//! Least-squares regression baseline.
//!
//! Backward over dates on one simulated training set: at date `k` each
//! continuation column `v_{k+1}(·, Q')` is projected on a polynomial basis of
//! the state (optionally augmented by the spot), and the decision at level
//! `Q` compares `c_k(q⁺) + proj(Q + q⁺)` with `c_k(q⁻) + proj(Q + q⁻)`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::contract::ContractSpec;
use crate::error::{Error, Result};
use crate::market::{derive_seed, StateProcess};
use crate::policy::{ContinuationTable, DecisionPolicy};
use crate::volume::QGrid;

const TAG_LS: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsConfig {
    pub train_paths: usize,
    /// Maximal total degree of the state monomials.
    pub degree: u32,
    pub include_spot: bool,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for LsConfig {
    fn default() -> Self {
        Self {
            train_paths: 100_000,
            degree: 2,
            include_spot: true,
            ridge: 1e-8,
            seed: 0,
        }
    }
}

/// Monomial exponents of the state plus the optional spot column.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    monomials: Vec<Vec<u32>>,
    include_spot: bool,
}

impl Basis {
    pub fn new(dim: usize, degree: u32, include_spot: bool) -> Self {
        let mut monomials = Vec::new();
        let mut current = vec![0u32; dim];
        collect_monomials(0, degree, &mut current, &mut monomials);
        monomials.sort_by_key(|m| m.iter().sum::<u32>());
        Self {
            monomials,
            include_spot,
        }
    }

    /// Number of columns, constant included.
    pub fn len(&self) -> usize {
        self.monomials.len() + self.include_spot as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(&self, s: ArrayView1<f64>, spot: f64, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.monomials) {
            *o = m
                .iter()
                .zip(s.iter())
                .map(|(e, x)| x.powi(*e as i32))
                .product();
        }
        if self.include_spot {
            out[self.monomials.len()] = spot;
        }
    }

    fn matrix(&self, states: ArrayView2<f64>, spots: &[f64]) -> Array2<f64> {
        let mut phi = Array2::zeros((states.nrows(), self.len()));
        for (m, (s, mut row)) in states.rows().into_iter().zip(phi.rows_mut()).enumerate() {
            self.row(s, spots[m], row.as_slice_mut().unwrap());
        }
        phi
    }
}

fn collect_monomials(i: usize, budget: u32, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if i == current.len() {
        out.push(current.clone());
        return;
    }
    for e in 0..=budget {
        current[i] = e;
        collect_monomials(i + 1, budget - e, current, out);
    }
    current[i] = 0;
}

/// Column centering and scaling; degenerate columns are switched off.
#[derive(Debug, Clone, PartialEq)]
struct Scaling {
    mean: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<bool>,
}

impl Scaling {
    fn fit(phi: &Array2<f64>) -> Self {
        let p = phi.ncols();
        let nrows = phi.nrows() as f64;
        let mut mean = vec![0.0; p];
        let mut scale = vec![1.0; p];
        let mut active = vec![true; p];
        for j in 0..p {
            let col = phi.column(j);
            let mu = col.sum() / nrows;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nrows;
            let constant = var <= 1e-24 * (1.0 + mu * mu);
            if constant {
                // The constant monomial stays as the intercept; other constant
                // columns would duplicate it.
                active[j] = j == 0;
            } else {
                mean[j] = mu;
                scale[j] = var.sqrt();
            }
        }
        Self {
            mean,
            scale,
            active,
        }
    }

    fn apply(&self, phi: &mut Array2<f64>) {
        for (j, mut col) in phi.columns_mut().into_iter().enumerate() {
            if !self.active[j] {
                col.fill(0.0);
            } else if j > 0 {
                let (mu, sd) = (self.mean[j], self.scale[j]);
                col.mapv_inplace(|v| (v - mu) / sd);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct LsDate {
    levels: Vec<i64>,
    scaling: Scaling,
    /// `β(Q + q⁺) - β(Q + q⁻)` per task.
    coef_diff: Vec<Vec<f64>>,
    /// `(q⁻, q⁺)` per task.
    branches: Vec<(i64, i64)>,
}

/// Regression rule fitted by [`fit_ls`].
#[derive(Debug, Clone)]
pub struct LsPolicy {
    contract: ContractSpec,
    basis: Basis,
    dates: Vec<Option<LsDate>>,
}

impl LsPolicy {
    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    fn date(&self, k: usize, level: i64) -> Result<&LsDate> {
        self.dates
            .get(k)
            .and_then(Option::as_ref)
            .ok_or(Error::PolicyUndefined { date: k, level })
    }

    fn margin(&self, d: &LsDate, task: usize, phi_row: &[f64], spot: f64) -> f64 {
        let (q_lo, q_hi) = d.branches[task];
        let reward = self.contract.immediate_reward(spot, q_hi) - self.contract.immediate_reward(spot, q_lo);
        reward
            + d.coef_diff[task]
                .iter()
                .zip(phi_row)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }

    fn scaled_basis(&self, d: &LsDate, states: ArrayView2<f64>, spots: &[f64]) -> Array2<f64> {
        let mut phi = self.basis.matrix(states, spots);
        d.scaling.apply(&mut phi);
        phi
    }
}

impl DecisionPolicy for LsPolicy {
    fn decide_levels(
        &self,
        k: usize,
        states: ArrayView2<f64>,
        spots: &[f64],
        levels: &[i64],
    ) -> Result<Array2<bool>> {
        let d = self.date(k, levels.first().copied().unwrap_or(0))?;
        let tasks = levels
            .iter()
            .map(|q| {
                d.levels
                    .binary_search(q)
                    .map_err(|_| Error::PolicyUndefined { date: k, level: *q })
            })
            .collect::<Result<Vec<_>>>()?;
        let phi = self.scaled_basis(d, states, spots);
        let mut out = Array2::from_elem((states.nrows(), levels.len()), false);
        for (m, row) in phi.rows().into_iter().enumerate() {
            let row = row.as_slice().unwrap();
            for (i, t) in tasks.iter().enumerate() {
                out[[m, i]] = self.margin(d, *t, row, spots[m]) >= 0.0;
            }
        }
        Ok(out)
    }

    fn decide(
        &self,
        k: usize,
        states: ArrayView2<f64>,
        spots: &[f64],
        levels: &[i64],
    ) -> Result<Vec<bool>> {
        let d = self.date(k, levels.first().copied().unwrap_or(0))?;
        let phi = self.scaled_basis(d, states, spots);
        phi.rows()
            .into_iter()
            .zip(levels)
            .enumerate()
            .map(|(m, (row, q))| {
                let t = d
                    .levels
                    .binary_search(q)
                    .map_err(|_| Error::PolicyUndefined { date: k, level: *q })?;
                Ok(self.margin(d, t, row.as_slice().unwrap(), spots[m]) >= 0.0)
            })
            .collect()
    }
}

/// Least-squares coefficients for several right-hand sides sharing one design.
fn solve_normal_equations(phi: &Array2<f64>, rhs: &Array2<f64>, ridge: f64, k: usize) -> Result<DMatrix<f64>> {
    let (nrows, p) = phi.dim();
    let gram = phi.t().dot(phi) / nrows as f64;
    let cross = phi.t().dot(rhs) / nrows as f64;
    let a = DMatrix::from_fn(p, p, |i, j| gram[[i, j]]);
    let b = DMatrix::from_fn(p, rhs.ncols(), |i, j| cross[[i, j]]);
    let active: Vec<usize> = (0..p).filter(|j| gram[[*j, *j]] > 0.0).collect();
    let a = a.select_rows(&active).select_columns(&active);
    let b = b.select_rows(&active);
    let solved = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => {
            log::warn!("date {k}: normal equations are rank deficient, using ridge {ridge:e}");
            let scale = a.diagonal().max().max(1.0);
            let mut r = a;
            for i in 0..r.nrows() {
                r[(i, i)] += ridge * scale;
            }
            r.cholesky()
                .ok_or_else(|| Error::Numeric {
                    layer: format!("regression at date {k}"),
                })?
                .solve(&b)
        }
    };
    let mut full = DMatrix::zeros(p, rhs.ncols());
    for (row, j) in active.iter().enumerate() {
        full.set_row(*j, &solved.row(row));
    }
    Ok(full)
}

pub fn fit_ls(process: &dyn StateProcess, contract: &ContractSpec, cfg: &LsConfig) -> Result<LsPolicy> {
    let findings = contract.validate();
    if !findings.is_empty() {
        return Err(Error::Config(findings));
    }
    let grid = QGrid::new(contract.volume)?;
    let n = grid.n_dates();
    if process.n_dates() != n {
        return Err(Error::Usage(format!(
            "model has {} dates, contract has {n}",
            process.n_dates()
        )));
    }
    let basis = Basis::new(process.dim(), cfg.degree, cfg.include_spot);
    if cfg.train_paths < 10 * basis.len() {
        return Err(Error::Config(vec![format!(
            "ls.train_paths ({}) must be at least 10 times the basis size ({})",
            cfg.train_paths,
            basis.len()
        )]));
    }
    let paths = process.sample_paths(derive_seed(cfg.seed, TAG_LS), cfg.train_paths, 0)?;
    let mut policy = LsPolicy {
        contract: *contract,
        basis,
        dates: vec![None; n],
    };
    let mut table = ContinuationTable::terminal(contract, &grid, &process.spots(n, paths.states(n)));
    for k in (0..n).rev() {
        let states = paths.states(k);
        let spots = process.spots(k, states);
        let levels = grid.tasks(k);
        let mut date = LsDate {
            levels: levels.clone(),
            scaling: Scaling {
                mean: Vec::new(),
                scale: Vec::new(),
                active: Vec::new(),
            },
            coef_diff: Vec::new(),
            branches: Vec::new(),
        };
        if !levels.is_empty() {
            let mut phi = policy.basis.matrix(states, &spots);
            let scaling = Scaling::fit(&phi);
            scaling.apply(&mut phi);
            let (lo, _) = grid.bounds(k + 1);
            let mut targets: Vec<i64> = Vec::new();
            for q in &levels {
                let (a, b) = grid.admissible(k, *q)?;
                date.branches.push((a, b));
                targets.push(q + a);
                targets.push(q + b);
            }
            targets.sort_unstable();
            targets.dedup();
            let mut rhs = Array2::zeros((paths.n_paths(), targets.len()));
            for (c, t) in targets.iter().enumerate() {
                rhs.column_mut(c)
                    .assign(&table.values().column((t - lo) as usize));
            }
            let coef = solve_normal_equations(&phi, &rhs, cfg.ridge, k)?;
            let column = |level: i64| -> DVector<f64> {
                coef.column(targets.binary_search(&level).unwrap()).into_owned()
            };
            for (q, (a, b)) in levels.iter().zip(&date.branches) {
                let diff = column(q + b) - column(q + a);
                date.coef_diff.push(diff.iter().copied().collect());
            }
            date.scaling = scaling;
        }
        policy.dates[k] = Some(date);
        if k > 0 {
            table = table.step_back(contract, &grid, &policy, states, &spots)?;
        }
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(Basis::new(1, 2, true).len(), 4);
        assert_eq!(Basis::new(3, 2, true).len(), 11);
        assert_eq!(Basis::new(3, 0, false).len(), 1);
        let b = Basis::new(2, 2, false);
        assert_eq!(b.monomials[0], vec![0, 0]);
    }

    #[test]
    fn regression_recovers_polynomial() {
        let x: Vec<f64> = (0..200).map(|i| i as f64 / 100.0 - 1.0).collect();
        let states = Array2::from_shape_vec((200, 1), x.clone()).unwrap();
        let spots = vec![0.0; 200];
        let basis = Basis::new(1, 2, false);
        let phi = basis.matrix(states.view(), &spots);
        let rhs = Array2::from_shape_fn((200, 1), |(m, _)| 1.0 + 2.0 * x[m] - 3.0 * x[m] * x[m]);
        let coef = solve_normal_equations(&phi, &rhs, 1e-8, 0).unwrap();
        let want = [1.0, 2.0, -3.0];
        let mut got: Vec<(Vec<u32>, f64)> = basis
            .monomials
            .iter()
            .cloned()
            .zip(coef.column(0).iter().copied())
            .collect();
        got.sort_by_key(|(m, _)| m[0]);
        for ((_, g), w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_design_falls_back_to_ridge() {
        let states = Array2::from_shape_fn((50, 1), |(m, _)| m as f64);
        let spots: Vec<f64> = (0..50).map(|m| 2.0 * m as f64).collect();
        let basis = Basis::new(1, 1, true);
        let phi = basis.matrix(states.view(), &spots);
        let rhs = Array2::from_shape_fn((50, 1), |(m, _)| m as f64);
        let coef = solve_normal_equations(&phi, &rhs, 1e-8, 0).unwrap();
        assert!(coef.iter().all(|c| c.is_finite()));
    }
}
