//! Multi-factor Gaussian forward-price model.
//!
//! Each factor is an Ornstein-Uhlenbeck integral
//! `s_k^i = ∫_0^{t_k} exp(-α_i (t_k - u)) dW_u^i` driven by correlated Brownian
//! motions, and the spot is the forward curve times the exponential martingale
//! `exp(<σ, s_k> - λ_k² / 2)`. Paths are simulated with the exact Gaussian
//! recursion, so there is no discretization bias on the exercise grid.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array3, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixes a base seed with a tag into an independent-looking 64-bit seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x632b_e59b_d9b4_e019)))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Random stream owned by a single path. Path `m` always sees the same
/// numbers for a given seed, whatever the batch size or scheduling.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Anything that can generate state paths on the exercise grid and map a
/// state to a spot price.
pub trait StateProcess: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of exercise dates `n`; states live on dates `0..=n`.
    fn n_dates(&self) -> usize;

    fn spot(&self, k: usize, s: ArrayView1<f64>) -> f64;

    /// Paths with global indices `first_path..first_path + count`, starting
    /// from the exact marginal law at `k_start`.
    fn fill_paths(&self, seed: u64, first_path: u64, count: usize, k_start: usize)
        -> Result<PathBatch>;

    fn sample_paths(&self, seed: u64, count: usize, k_start: usize) -> Result<PathBatch> {
        self.fill_paths(seed, 0, count, k_start)
    }

    fn spots(&self, k: usize, states: ArrayView2<f64>) -> Vec<f64> {
        states.rows().into_iter().map(|s| self.spot(k, s)).collect()
    }
}

/// Factor paths from `k_start` to `n`, stored date-major so that the slice
/// at one date is a contiguous `M x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    values: Array3<f64>,
    k_start: usize,
}

impl PathBatch {
    pub fn new(values: Array3<f64>, k_start: usize) -> Self {
        Self { values, k_start }
    }

    pub fn k_start(&self) -> usize {
        self.k_start
    }

    pub fn last_date(&self) -> usize {
        self.k_start + self.values.shape()[0] - 1
    }

    pub fn n_paths(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// States of every path at date `k` (`M x d`).
    pub fn states(&self, k: usize) -> ArrayView2<'_, f64> {
        assert!(
            k >= self.k_start && k <= self.last_date(),
            "date {k} outside stored range {}..={}",
            self.k_start,
            self.last_date()
        );
        self.values.index_axis(ndarray::Axis(0), k - self.k_start)
    }

    pub fn raw(&self) -> &Array3<f64> {
        &self.values
    }
}

/// Serializable parameters of the factor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelParams {
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    /// `F_{0,t_k}` for `k = 0..=n`.
    pub forward: Vec<f64>,
    /// `t_0 < t_1 < ... < t_n`, in years.
    pub times: Vec<f64>,
}

/// Validated factor model with precomputed covariance square roots.
#[derive(Debug, Clone)]
pub struct FactorModel {
    params: FactorModelParams,
    rho: DMatrix<f64>,
    marginal_roots: Vec<DMatrix<f64>>,
    decays: Vec<DVector<f64>>,
    innovation_roots: Vec<DMatrix<f64>>,
    lambda_sq: Vec<f64>,
}

impl FactorModel {
    pub fn new(params: FactorModelParams) -> Result<Self> {
        let problems = validate_params(&params);
        if !problems.is_empty() {
            return Err(Error::Model(problems.join("; ")));
        }
        let d = params.alpha.len();
        let rho = DMatrix::from_fn(d, d, |i, j| params.rho[i][j]);
        psd_root(&rho).map_err(|e| Error::Model(format!("correlation matrix: {e}")))?;

        let mut model = Self {
            params,
            rho,
            marginal_roots: Vec::new(),
            decays: Vec::new(),
            innovation_roots: Vec::new(),
            lambda_sq: Vec::new(),
        };
        let n = model.n_dates();
        for k in 0..=n {
            let cov = model.marginal_covariance(k);
            let root = psd_root(&cov)
                .map_err(|e| Error::Model(format!("marginal covariance at date {k}: {e}")))?;
            model.marginal_roots.push(root);
            let sigma = DVector::from_column_slice(&model.params.sigma);
            model.lambda_sq.push((sigma.transpose() * &cov * &sigma)[(0, 0)].max(0.0));
        }
        for k in 0..n {
            let (decay, cov) = model.transition(k);
            let root = psd_root(&cov)
                .map_err(|e| Error::Model(format!("innovation covariance at date {k}: {e}")))?;
            model.decays.push(decay);
            model.innovation_roots.push(root);
        }
        Ok(model)
    }

    /// Uniform grid `t_k = t0 + k (maturity - t0) / n` with a flat forward curve.
    pub fn uniform(
        alpha: Vec<f64>,
        sigma: Vec<f64>,
        rho: Vec<Vec<f64>>,
        forward: f64,
        t0: f64,
        maturity: f64,
        n: usize,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Model("at least one exercise date is required".into()));
        }
        let times = (0..=n)
            .map(|k| t0 + k as f64 * (maturity - t0) / n as f64)
            .collect();
        Self::new(FactorModelParams {
            alpha,
            sigma,
            rho,
            forward: vec![forward; n + 1],
            times,
        })
    }

    pub fn params(&self) -> &FactorModelParams {
        &self.params
    }

    pub fn time(&self, k: usize) -> f64 {
        self.params.times[k]
    }

    pub fn forward(&self, k: usize) -> f64 {
        self.params.forward[k]
    }

    /// `C_ij = ρ_ij (1 - exp(-(α_i + α_j) t_k)) / (α_i + α_j)`.
    pub fn marginal_covariance(&self, k: usize) -> DMatrix<f64> {
        ou_covariance(&self.params.alpha, &self.rho, self.params.times[k])
    }

    /// Exact one-step law from `t_k` to `t_{k+1}`: per-factor decay and the
    /// covariance of the Gaussian innovation.
    pub fn transition(&self, k: usize) -> (DVector<f64>, DMatrix<f64>) {
        let dt = self.params.times[k + 1] - self.params.times[k];
        let decay = DVector::from_iterator(
            self.params.alpha.len(),
            self.params.alpha.iter().map(|a| (-a * dt).exp()),
        );
        (decay, ou_covariance(&self.params.alpha, &self.rho, dt))
    }

    /// Variance of `<σ, s_k>`.
    pub fn lambda_sq(&self, k: usize) -> f64 {
        self.lambda_sq[k]
    }

    pub fn spot_from(&self, k: usize, s: ArrayView1<f64>) -> f64 {
        let exponent: f64 = self
            .params
            .sigma
            .iter()
            .zip(s.iter())
            .map(|(sig, x)| sig * x)
            .sum();
        self.params.forward[k] * (exponent - 0.5 * self.lambda_sq[k]).exp()
    }
}

impl StateProcess for FactorModel {
    fn dim(&self) -> usize {
        self.params.alpha.len()
    }

    fn n_dates(&self) -> usize {
        self.params.times.len() - 1
    }

    fn spot(&self, k: usize, s: ArrayView1<f64>) -> f64 {
        self.spot_from(k, s)
    }

    fn fill_paths(
        &self,
        seed: u64,
        first_path: u64,
        count: usize,
        k_start: usize,
    ) -> Result<PathBatch> {
        let n = self.n_dates();
        if k_start > n {
            return Err(Error::Usage(format!("start date {k_start} beyond last date {n}")));
        }
        if count == 0 {
            return Err(Error::Usage("path count must be at least 1".into()));
        }
        let d = self.dim();
        let mut values = Array3::<f64>::zeros((n + 1 - k_start, count, d));
        let mut z = vec![0.0; d];
        let mut s = vec![0.0; d];
        let mut next = vec![0.0; d];
        for p in 0..count {
            let mut rng = path_rng(seed, first_path + p as u64);
            draw_normals(&mut rng, &mut z);
            mat_vec(&self.marginal_roots[k_start], &z, &mut s);
            for i in 0..d {
                values[[0, p, i]] = s[i];
            }
            for k in k_start..n {
                draw_normals(&mut rng, &mut z);
                let root = &self.innovation_roots[k];
                let decay = &self.decays[k];
                mat_vec(root, &z, &mut next);
                for i in 0..d {
                    s[i] = decay[i] * s[i] + next[i];
                    values[[k + 1 - k_start, p, i]] = s[i];
                }
            }
        }
        Ok(PathBatch::new(values, k_start))
    }
}

fn draw_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for z in out.iter_mut() {
        *z = rng.sample(StandardNormal);
    }
}

fn mat_vec(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..x.len()).map(|j| m[(i, j)] * x[j]).sum();
    }
}

fn ou_covariance(alpha: &[f64], rho: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let d = alpha.len();
    DMatrix::from_fn(d, d, |i, j| {
        let a = alpha[i] + alpha[j];
        rho[(i, j)] * -(-a * t).exp_m1() / a
    })
}

fn validate_params(p: &FactorModelParams) -> Vec<String> {
    let mut problems = Vec::new();
    let d = p.alpha.len();
    if d == 0 {
        problems.push("at least one factor is required".to_string());
        return problems;
    }
    if p.sigma.len() != d {
        problems.push(format!("sigma has {} entries, expected {d}", p.sigma.len()));
    }
    if p.alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        problems.push("mean-reversion rates must be finite and positive".to_string());
    }
    if p.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        problems.push("volatilities must be finite and non-negative".to_string());
    }
    if p.rho.len() != d || p.rho.iter().any(|r| r.len() != d) {
        problems.push(format!("correlation matrix must be {d}x{d}"));
    } else {
        for i in 0..d {
            if (p.rho[i][i] - 1.0).abs() > 1e-12 {
                problems.push(format!("correlation diagonal entry {i} is not 1"));
            }
            for j in 0..i {
                if (p.rho[i][j] - p.rho[j][i]).abs() > 1e-12 {
                    problems.push(format!("correlation matrix not symmetric at ({i},{j})"));
                }
                if p.rho[i][j].abs() > 1.0 {
                    problems.push(format!("correlation ({i},{j}) outside [-1,1]"));
                }
            }
        }
    }
    if p.times.len() < 2 {
        problems.push("time grid needs at least two points".to_string());
    } else {
        if !(p.times[0].is_finite() && p.times[0] >= 0.0) {
            problems.push("t_0 must be non-negative".to_string());
        }
        for (k, w) in p.times.windows(2).enumerate() {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                problems.push(format!("time grid gap {k} is not strictly positive"));
            }
        }
    }
    if p.forward.len() != p.times.len() {
        problems.push(format!(
            "forward curve has {} points, time grid has {}",
            p.forward.len(),
            p.times.len()
        ));
    }
    if p.forward.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        problems.push("forward prices must be positive".to_string());
    }
    problems
}

/// Square root `L` with `L Lᵀ = C`: Cholesky when it succeeds, otherwise a
/// symmetric eigendecomposition with eigenvalues clipped at zero.
pub fn psd_root(c: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, String> {
    if let Some(ch) = c.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(c.clone());
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    if let Some(v) = eig.eigenvalues.iter().find(|v| **v < -tol) {
        return Err(format!("not positive semidefinite (eigenvalue {v:e})"));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Hull-White style three-point lattice for a single mean-reverting factor.
///
/// Node `j` at date `k` carries the state `j * dx_k`; each node branches to
/// three neighbours around the rounded conditional mean with probabilities
/// matching the conditional mean and variance of the exact transition.
#[derive(Debug, Clone)]
pub struct TrinomialFactor {
    model: FactorModel,
    dx: Vec<f64>,
    ranges: Vec<(i64, i64)>,
}

/// One lattice branch: destination node and probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub node: i64,
    pub prob: f64,
}

impl TrinomialFactor {
    pub fn new(model: FactorModel) -> Result<Self> {
        if model.dim() != 1 {
            return Err(Error::Model("trinomial lattice requires a single factor".into()));
        }
        if model.time(0) != 0.0 {
            return Err(Error::Model("trinomial lattice requires t_0 = 0".into()));
        }
        let n = model.n_dates();
        let mut dx = vec![0.0; n + 1];
        for k in 0..n {
            let (_, cov) = model.transition(k);
            dx[k + 1] = (3.0 * cov[(0, 0)]).sqrt();
        }
        let mut lattice = Self {
            model,
            dx,
            ranges: vec![(0, 0)],
        };
        for k in 0..n {
            let (lo, hi) = lattice.ranges[k];
            let mut new_lo = i64::MAX;
            let mut new_hi = i64::MIN;
            for j in [lo, hi] {
                for b in lattice.branches(k, j) {
                    new_lo = new_lo.min(b.node);
                    new_hi = new_hi.max(b.node);
                }
            }
            lattice.ranges.push((new_lo, new_hi));
        }
        Ok(lattice)
    }

    pub fn model(&self) -> &FactorModel {
        &self.model
    }

    /// Inclusive node index range at date `k`.
    pub fn node_range(&self, k: usize) -> (i64, i64) {
        self.ranges[k]
    }

    pub fn node_value(&self, k: usize, j: i64) -> f64 {
        j as f64 * self.dx[k]
    }

    pub fn branches(&self, k: usize, j: i64) -> [Branch; 3] {
        let (decay, _) = self.model.transition(k);
        let dx = self.dx[k + 1];
        let mean = decay[0] * self.node_value(k, j);
        if dx == 0.0 {
            return [
                Branch { node: 0, prob: 0.0 },
                Branch { node: 0, prob: 1.0 },
                Branch { node: 0, prob: 0.0 },
            ];
        }
        let mid = (mean / dx).round() as i64;
        let eta = (mean - mid as f64 * dx) / dx;
        let up = 1.0 / 6.0 + 0.5 * (eta * eta + eta);
        let down = 1.0 / 6.0 + 0.5 * (eta * eta - eta);
        [
            Branch { node: mid - 1, prob: down },
            Branch { node: mid, prob: 1.0 - up - down },
            Branch { node: mid + 1, prob: up },
        ]
    }

    /// Node probabilities at date `k`, indexed from `node_range(k).0`.
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        let mut probs = vec![1.0];
        for step in 0..k {
            let (lo, _) = self.ranges[step];
            let (next_lo, next_hi) = self.ranges[step + 1];
            let mut next = vec![0.0; (next_hi - next_lo + 1) as usize];
            for (offset, p) in probs.iter().enumerate() {
                for b in self.branches(step, lo + offset as i64) {
                    next[(b.node - next_lo) as usize] += p * b.prob;
                }
            }
            probs = next;
        }
        probs
    }

    fn pick(u: f64, probs: impl Iterator<Item = (i64, f64)>) -> i64 {
        let mut acc = 0.0;
        let mut last = 0;
        for (node, p) in probs {
            acc += p;
            last = node;
            if u < acc {
                return node;
            }
        }
        last
    }
}

impl StateProcess for TrinomialFactor {
    fn dim(&self) -> usize {
        1
    }

    fn n_dates(&self) -> usize {
        self.model.n_dates()
    }

    fn spot(&self, k: usize, s: ArrayView1<f64>) -> f64 {
        self.model.spot_from(k, s)
    }

    fn fill_paths(
        &self,
        seed: u64,
        first_path: u64,
        count: usize,
        k_start: usize,
    ) -> Result<PathBatch> {
        let n = self.n_dates();
        if k_start > n || count == 0 {
            return Err(Error::Usage("invalid lattice path request".into()));
        }
        let start_probs = self.marginal(k_start);
        let start_lo = self.ranges[k_start].0;
        let mut values = Array3::<f64>::zeros((n + 1 - k_start, count, 1));
        for p in 0..count {
            let mut rng = path_rng(seed, first_path + p as u64);
            let u: f64 = rng.random();
            let mut j = Self::pick(
                u,
                start_probs
                    .iter()
                    .enumerate()
                    .map(|(i, q)| (start_lo + i as i64, *q)),
            );
            values[[0, p, 0]] = self.node_value(k_start, j);
            for k in k_start..n {
                let u: f64 = rng.random();
                j = Self::pick(u, self.branches(k, j).iter().map(|b| (b.node, b.prob)));
                values[[k + 1 - k_start, p, 0]] = self.node_value(k + 1, j);
            }
        }
        Ok(PathBatch::new(values, k_start))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_factor(n: usize) -> FactorModel {
        FactorModel::uniform(vec![4.0], vec![0.7], vec![vec![1.0]], 20.0, 0.0, 1.0, n).unwrap()
    }

    fn three_factor(n: usize) -> FactorModel {
        let rho = (0..3)
            .map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.3 }).collect())
            .collect();
        FactorModel::uniform(vec![3.0; 3], vec![0.25; 3], rho, 20.0, 0.0, 1.0, n).unwrap()
    }

    #[test]
    fn covariance_vanishes_at_time_zero() {
        let m = three_factor(4);
        assert!(m.marginal_covariance(0).iter().all(|v| *v == 0.0));
        assert_eq!(m.lambda_sq(0), 0.0);
    }

    #[test]
    fn one_factor_closed_forms() {
        let m = one_factor(1);
        let c = m.marginal_covariance(1)[(0, 0)];
        assert_abs_diff_eq!(c, (1.0 - (-8.0f64).exp()) / 8.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c, 0.1249581, epsilon = 1e-7);
        assert_abs_diff_eq!(m.lambda_sq(1), 0.0612294, epsilon = 1e-7);
    }

    #[test]
    fn three_factor_lambda_matches_double_sum() {
        let m = three_factor(1);
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let rho = if i == j { 1.0 } else { 0.3 };
                expected += rho * 0.0625 / 6.0 * (1.0 - (-6.0f64).exp());
            }
        }
        assert_abs_diff_eq!(m.lambda_sq(1), expected, epsilon = 1e-14);
    }

    #[test]
    fn uncorrelated_drivers_have_zero_cross_covariance() {
        let m = FactorModel::uniform(
            vec![1.0, 2.0],
            vec![0.3, 0.4],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            20.0,
            0.0,
            1.0,
            2,
        )
        .unwrap();
        assert_eq!(m.marginal_covariance(2)[(0, 1)], 0.0);
    }

    #[test]
    fn transition_decay_and_stationary_limit() {
        let m = FactorModel::new(FactorModelParams {
            alpha: vec![4.0],
            sigma: vec![0.7],
            rho: vec![vec![1.0]],
            forward: vec![20.0; 3],
            times: vec![0.0, 1.0 / 30.0, 10.0 + 1.0 / 30.0],
        })
        .unwrap();
        let (decay, _) = m.transition(0);
        assert_abs_diff_eq!(decay[0], (-2.0f64 / 15.0).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(decay[0], 0.875173, epsilon = 1e-6);
        let (decay, cov) = m.transition(1);
        assert!(decay[0] < 1e-17);
        assert_abs_diff_eq!(cov[(0, 0)], 1.0 / 8.0, epsilon = 1e-15);
    }

    #[test]
    fn transitions_compose_to_marginals() {
        for m in [one_factor(30), three_factor(12)] {
            for k in 0..m.n_dates() {
                let (decay, innov) = m.transition(k);
                let c = m.marginal_covariance(k);
                let next = m.marginal_covariance(k + 1);
                let d = decay.len();
                for i in 0..d {
                    for j in 0..d {
                        let composed = decay[i] * c[(i, j)] * decay[j] + innov[(i, j)];
                        assert_abs_diff_eq!(composed, next[(i, j)], epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn spot_at_time_zero_is_forward() {
        let m = one_factor(5);
        let s = ndarray::arr1(&[0.0]);
        assert_eq!(m.spot(0, s.view()), 20.0);
        let v = m.lambda_sq(3);
        assert_abs_diff_eq!(m.spot(3, s.view()), 20.0 * (-v / 2.0).exp(), epsilon = 1e-14);
    }

    #[test]
    fn zero_volatility_paths_are_zero() {
        let m = FactorModel::uniform(vec![4.0], vec![0.0], vec![vec![1.0]], 20.0, 0.0, 1.0, 5)
            .unwrap();
        let p = m.sample_paths(1, 10, 0).unwrap();
        // Factors do not depend on σ; the spot collapses to the forward.
        for k in 0..=5 {
            for s in m.spots(k, p.states(k)) {
                assert_eq!(s, 20.0);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_prefix_stable() {
        let m = three_factor(6);
        let a = m.sample_paths(99, 50, 0).unwrap();
        let b = m.sample_paths(99, 50, 0).unwrap();
        assert_eq!(a, b);
        let tail = m.fill_paths(99, 20, 30, 0).unwrap();
        assert_eq!(
            tail.raw().slice(ndarray::s![.., 0..30, ..]),
            a.raw().slice(ndarray::s![.., 20..50, ..])
        );
    }

    #[test]
    fn first_state_is_deterministic_when_grid_starts_at_zero() {
        let m = one_factor(3);
        let p = m.sample_paths(5, 100, 0).unwrap();
        assert!(p.states(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sample_variance_matches_marginal() {
        let m = one_factor(30);
        let paths = m.sample_paths(2024, 100_000, 0).unwrap();
        let s = paths.states(30);
        let n = s.nrows() as f64;
        let mean = s.sum() / n;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = m.marginal_covariance(30)[(0, 0)];
        // Var of the sample variance of a Gaussian is 2σ⁴/(n-1).
        let se = (2.0 * target * target / (n - 1.0)).sqrt();
        assert!((var - target).abs() < 3.0 * se, "{var} vs {target}");
    }

    #[test]
    fn sampling_from_interior_date_uses_marginal() {
        let m = one_factor(10);
        let p = m.sample_paths(3, 50_000, 6).unwrap();
        assert_eq!(p.k_start(), 6);
        let s = p.states(6);
        let n = s.nrows() as f64;
        let var = s.iter().map(|v| v * v).sum::<f64>() / n;
        let target = m.marginal_covariance(6)[(0, 0)];
        assert!((var / target - 1.0).abs() < 0.03);
    }

    #[test]
    fn rejects_bad_models() {
        let bad_rho = FactorModel::uniform(
            vec![1.0, 1.0],
            vec![0.1, 0.1],
            vec![vec![1.0, 1.5], vec![1.5, 1.0]],
            20.0,
            0.0,
            1.0,
            3,
        );
        assert!(matches!(bad_rho, Err(Error::Model(_))));
        let not_psd = FactorModel::uniform(
            vec![1.0; 3],
            vec![0.1; 3],
            vec![
                vec![1.0, 0.9, -0.9],
                vec![0.9, 1.0, 0.9],
                vec![-0.9, 0.9, 1.0],
            ],
            20.0,
            0.0,
            1.0,
            3,
        );
        assert!(matches!(not_psd, Err(Error::Model(_))));
        let flat_grid = FactorModel::new(FactorModelParams {
            alpha: vec![1.0],
            sigma: vec![0.1],
            rho: vec![vec![1.0]],
            forward: vec![20.0; 3],
            times: vec![0.0, 0.0, 1.0],
        });
        assert!(matches!(flat_grid, Err(Error::Model(_))));
    }

    #[test]
    fn singular_correlation_is_accepted() {
        let m = FactorModel::uniform(
            vec![1.0, 2.0],
            vec![0.2, 0.2],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            20.0,
            0.0,
            1.0,
            4,
        )
        .unwrap();
        let p = m.sample_paths(1, 4, 0).unwrap();
        assert!(p.raw().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lattice_matches_transition_moments() {
        let lattice = TrinomialFactor::new(one_factor(4)).unwrap();
        for k in 0..4 {
            let (decay, cov) = lattice.model().transition(k);
            let (lo, hi) = lattice.node_range(k);
            for j in lo..=hi {
                let x = lattice.node_value(k, j);
                let b = lattice.branches(k, j);
                let total: f64 = b.iter().map(|b| b.prob).sum();
                let mean: f64 = b.iter().map(|b| b.prob * lattice.node_value(k + 1, b.node)).sum();
                let second: f64 = b
                    .iter()
                    .map(|b| b.prob * (lattice.node_value(k + 1, b.node) - mean).powi(2))
                    .sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
                assert!(b.iter().all(|b| b.prob >= 0.0));
                assert_abs_diff_eq!(mean, decay[0] * x, epsilon = 1e-12);
                assert_abs_diff_eq!(second, cov[(0, 0)], epsilon = 1e-12);
            }
        }
        let total: f64 = lattice.marginal(4).iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }
}
