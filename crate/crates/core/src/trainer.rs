//! Backward training of the per-date multitask networks.
//!
//! Dates are processed from `n-1` down to `0`. At date `k` the networks of
//! later dates are frozen, so pathwise continuation values `v_{k+1}` are
//! available for every reachable level; the branch payoffs `ψ⁺`, `ψ⁻` built
//! from them are the only training signal.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contract::ContractSpec;
use crate::error::{Error, Result};
use crate::market::{derive_seed, PathBatch, StateProcess};
use crate::nn::{
    scalar_features, task_features, AdamState, Architecture, Mode, MultitaskNet, NetCheckpoint,
    TaskFeatures,
};
use crate::policy::{continuation_table, ContinuationTable, DecisionPolicy};
use crate::valuation::{evaluate_on_paths, ValuationResult};
use crate::volume::QGrid;
use crate::weighting::{Scheme, SmagParams, WeightState};

const TAG_POOL: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_UW: u64 = 4;
pub const TAG_VALIDATION: u64 = 5;
const TAG_FRESH: u64 = 6;
const TAG_SWEEP: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Each date trained to completion before moving to the previous one.
    Sequential,
    /// One optimizer step per date per backward sweep, with a validation
    /// price after every sweep.
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Minibatches drawn from one simulated pool of full paths whose
    /// continuation values are rolled back once per date.
    Pooled,
    /// A fresh batch per iteration, started from the exact marginal law at
    /// the training date and rolled out through every later date.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_lr: f64,
    pub scheme: Scheme,
    pub alpha: f64,
    pub beta: f64,
    pub weight_floor: f64,
    pub seed: u64,
    pub mode: TrainingMode,
    pub sampling: Sampling,
    pub pool_size: usize,
    pub validation_paths: usize,
    pub width: usize,
    pub transfer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let smag = SmagParams::default();
        Self {
            iterations: 200,
            batch_size: 2048,
            learning_rate: 0.001,
            weight_lr: smag.weight_lr,
            scheme: Scheme::Smag,
            alpha: smag.alpha,
            beta: smag.beta,
            weight_floor: smag.floor,
            seed: 0,
            mode: TrainingMode::Sequential,
            sampling: Sampling::Pooled,
            pool_size: 65_536,
            validation_paths: 10_000,
            width: 50,
            transfer: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut findings = Vec::new();
        if self.iterations == 0 {
            findings.push("training.iterations must be positive".to_string());
        }
        if self.batch_size < 2 {
            findings.push("training.batch_size must be at least 2".to_string());
        }
        if self.width == 0 {
            findings.push("training.width must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            findings.push("training.learning_rate must be positive".to_string());
        }
        if !(self.weight_lr >= 0.0 && self.weight_lr.is_finite()) {
            findings.push("training.weight_lr must be non-negative".to_string());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            findings.push("training.alpha must be non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            findings.push("training.beta must lie in [0, 1]".to_string());
        }
        if !(self.weight_floor > 0.0 && self.weight_floor < 1.0) {
            findings.push("training.weight_floor must lie in (0, 1)".to_string());
        }
        if self.sampling == Sampling::Pooled && self.pool_size < self.batch_size {
            findings.push(format!(
                "training.pool_size ({}) must be at least the batch size ({})",
                self.pool_size, self.batch_size
            ));
        }
        if self.mode == TrainingMode::Sweep && self.validation_paths < 2 {
            findings.push("training.validation_paths must be at least 2 in sweep mode".to_string());
        }
        findings
    }

    pub fn smag_params(&self) -> SmagParams {
        SmagParams {
            alpha: self.alpha,
            beta: self.beta,
            weight_lr: self.weight_lr,
            floor: self.weight_floor,
        }
    }
}

/// Trained network of one date with the levels its heads serve.
#[derive(Debug, Clone)]
pub struct DateNet {
    pub net: MultitaskNet,
    /// Non-trivial levels, in head order.
    pub levels: Vec<i64>,
    features: TaskFeatures,
}

impl DateNet {
    fn new(net: MultitaskNet, levels: Vec<i64>, features: TaskFeatures) -> Self {
        Self {
            net,
            levels,
            features,
        }
    }

    fn head_of(&self, k: usize, level: i64) -> Result<usize> {
        self.levels
            .binary_search(&level)
            .map_err(|_| Error::PolicyUndefined { date: k, level })
    }
}

#[derive(Debug, Clone)]
enum DateRule {
    /// Every level is trivial at this date.
    Forced,
    Net(Box<DateNet>),
}

/// Bang-bang rule `F = 1{f ≥ 1/2}` read from per-date networks in eval mode.
#[derive(Debug, Clone)]
pub struct NetPolicy {
    grid: QGrid,
    dates: Vec<Option<DateRule>>,
}

impl NetPolicy {
    pub fn new(grid: QGrid) -> Self {
        let n = grid.n_dates();
        Self {
            grid,
            dates: vec![None; n],
        }
    }

    pub fn grid(&self) -> &QGrid {
        &self.grid
    }

    pub fn date_net(&self, k: usize) -> Option<&DateNet> {
        match self.dates.get(k)? {
            Some(DateRule::Net(d)) => Some(d),
            _ => None,
        }
    }

    fn date_net_mut(&mut self, k: usize) -> Option<&mut DateNet> {
        match self.dates.get_mut(k)? {
            Some(DateRule::Net(d)) => Some(d),
            _ => None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.dates.iter().all(Option::is_some)
    }

    fn set_forced(&mut self, k: usize) {
        self.dates[k] = Some(DateRule::Forced);
    }

    fn set_net(&mut self, k: usize, date_net: DateNet) {
        self.dates[k] = Some(DateRule::Net(Box::new(date_net)));
    }

    fn rule(&self, k: usize, level: i64) -> Result<&DateNet> {
        match self.dates.get(k) {
            Some(Some(DateRule::Net(d))) => Ok(d),
            _ => Err(Error::PolicyUndefined { date: k, level }),
        }
    }

    /// One JSON file per date plus a manifest.
    pub fn save(&self, dir: &Path, manifest: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (k, rule) in self.dates.iter().enumerate() {
            let entry = match rule {
                None => return Err(Error::Checkpoint(format!("date {k} has no rule"))),
                Some(DateRule::Forced) => PolicyEntry {
                    date: k,
                    file: None,
                    levels: Vec::new(),
                },
                Some(DateRule::Net(d)) => {
                    let file = format!("date_{k:04}.json");
                    let ck = DateCheckpoint {
                        levels: d.levels.clone(),
                        net: d.net.to_checkpoint(),
                    };
                    fs::write(dir.join(&file), serde_json::to_vec(&ck)?)?;
                    PolicyEntry {
                        date: k,
                        file: Some(file),
                        levels: d.levels.clone(),
                    }
                }
            };
            entries.push(entry);
        }
        let manifest = PolicyManifest {
            format_version: 1,
            n_dates: self.grid.n_dates(),
            constraints: *self.grid.constraints(),
            dates: entries,
            extra: manifest.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read(&path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let manifest: PolicyManifest = serde_json::from_slice(&text)?;
        if manifest.format_version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported policy format version {}",
                manifest.format_version
            )));
        }
        let grid = QGrid::new(manifest.constraints)?;
        let mut policy = NetPolicy::new(grid);
        if manifest.dates.len() != manifest.n_dates {
            return Err(Error::Checkpoint("manifest lists the wrong number of dates".into()));
        }
        for entry in manifest.dates {
            match entry.file {
                None => policy.set_forced(entry.date),
                Some(file) => {
                    let ck: DateCheckpoint = serde_json::from_slice(&fs::read(dir.join(&file))?)?;
                    let net = MultitaskNet::from_checkpoint(ck.net)?;
                    let features = policy.features(entry.date, &ck.levels);
                    policy.set_net(entry.date, DateNet::new(net, ck.levels, features));
                }
            }
        }
        Ok(policy)
    }

    fn features(&self, k: usize, levels: &[i64]) -> TaskFeatures {
        if k == 0 {
            scalar_features()
        } else {
            let c = self.grid.constraints();
            task_features(&levels.iter().map(|q| c.remaining_capacity(*q)).collect::<Vec<_>>())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyEntry {
    date: usize,
    file: Option<String>,
    levels: Vec<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyManifest {
    format_version: u32,
    n_dates: usize,
    constraints: crate::volume::VolumeConstraints,
    dates: Vec<PolicyEntry>,
    extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct DateCheckpoint {
    levels: Vec<i64>,
    net: NetCheckpoint,
}

impl DecisionPolicy for NetPolicy {
    fn decide_levels(
        &self,
        k: usize,
        states: ArrayView2<f64>,
        _spots: &[f64],
        levels: &[i64],
    ) -> Result<Array2<bool>> {
        let first = levels.first().copied().unwrap_or(0);
        let d = self.rule(k, first)?;
        let heads = levels
            .iter()
            .map(|q| d.head_of(k, *q))
            .collect::<Result<Vec<_>>>()?;
        let logits = d.net.logits_eval(states, &d.features)?;
        let picked = logits.select(Axis(1), &heads);
        Ok(picked.mapv(|z| z >= 0.0))
    }

    fn decide(
        &self,
        k: usize,
        states: ArrayView2<f64>,
        _spots: &[f64],
        levels: &[i64],
    ) -> Result<Vec<bool>> {
        let first = levels.first().copied().unwrap_or(0);
        let d = self.rule(k, first)?;
        let heads = levels
            .iter()
            .map(|q| d.head_of(k, *q))
            .collect::<Result<Vec<_>>>()?;
        let hidden = d.net.hidden_eval(states)?;
        let (u, c) = d.net.effective_heads(&d.features)?;
        Ok(hidden
            .rows()
            .into_iter()
            .zip(&heads)
            .map(|(h, &i)| h.dot(&u.column(i)) + c[i] >= 0.0)
            .collect())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    /// Training date, or `None` for a sweep summary.
    pub date: Option<usize>,
    pub loss_mean: f64,
    pub loss_min: f64,
    pub loss_max: f64,
    pub weight_mean: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub global_loss: f64,
    pub snapshot: Option<ValuationResult>,
}

impl TrainLogRow {
    fn new(iteration: usize, date: Option<usize>, losses: &[f64], weights: &[f64], global: f64) -> Self {
        let (loss_mean, loss_min, loss_max) = summary(losses);
        let (weight_mean, weight_min, weight_max) = summary(weights);
        Self {
            iteration,
            date,
            loss_mean,
            loss_min,
            loss_max,
            weight_mean,
            weight_min,
            weight_max,
            global_loss: global,
            snapshot: None,
        }
    }
}

fn summary(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: NetPolicy,
    pub log: Vec<TrainLogRow>,
    /// Trunk parameters of each date's network right after initialization
    /// (before the first optimizer step); `None` for forced dates.
    pub initial_trunks: Vec<Option<Vec<f64>>>,
}

/// Per-date optimization state.
struct DateTrainer {
    net: MultitaskNet,
    adam: AdamState,
    weights: WeightState,
    levels: Vec<i64>,
    features: TaskFeatures,
}

fn new_net(k: usize, dim: usize, task_count: usize, cfg: &TrainConfig) -> Result<MultitaskNet> {
    let arch = if k == 0 {
        Architecture::scalar(dim, cfg.width)
    } else {
        Architecture::multitask(dim, cfg.width, task_count)
    };
    MultitaskNet::new(arch, derive_seed(derive_seed(cfg.seed, TAG_INIT), k as u64))
}

impl DateTrainer {
    fn new(k: usize, policy: &NetPolicy, cfg: &TrainConfig, net: MultitaskNet) -> Self {
        let levels = policy.grid.tasks(k);
        let features = policy.features(k, &levels);
        let adam = AdamState::new(net.params().len());
        let weights = WeightState::new(
            cfg.scheme,
            levels.len(),
            derive_seed(derive_seed(cfg.seed, TAG_UW), k as u64),
            cfg.smag_params(),
        );
        Self {
            net,
            adam,
            weights,
            levels,
            features,
        }
    }

    fn step(
        &mut self,
        states: ArrayView2<f64>,
        psi_plus: ArrayView2<f64>,
        psi_minus: ArrayView2<f64>,
        lr: f64,
    ) -> Result<(Vec<f64>, f64)> {
        self.net.set_mode(Mode::Train);
        let smag = self.weights.scheme == Scheme::Smag;
        let out = self.net.loss_and_gradients(
            states,
            &self.features,
            psi_plus,
            psi_minus,
            self.weights.weights(),
            smag,
        )?;
        self.adam.step(self.net.params_mut(), &out.grads, lr);
        self.weights
            .observe(&out.task_losses, out.task_grad_norms.as_deref());
        self.net.set_mode(Mode::Eval);
        Ok((out.task_losses, out.global_loss))
    }
}

/// Train bang-bang networks for every date of `contract` under `process`.
pub fn train_policy(
    process: &dyn StateProcess,
    contract: &ContractSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let mut findings = contract.validate();
    findings.extend(cfg.validate());
    if !findings.is_empty() {
        return Err(Error::Config(findings));
    }
    let grid = QGrid::new(contract.volume)?;
    if process.n_dates() != grid.n_dates() {
        return Err(Error::Usage(format!(
            "model has {} dates, contract has {}",
            process.n_dates(),
            grid.n_dates()
        )));
    }
    match cfg.mode {
        TrainingMode::Sequential => train_sequential(process, contract, grid, cfg),
        TrainingMode::Sweep => train_sweeps(process, contract, grid, cfg),
    }
}

fn train_sequential(
    process: &dyn StateProcess,
    contract: &ContractSpec,
    grid: QGrid,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let n = grid.n_dates();
    let dim = process.dim();
    let mut policy = NetPolicy::new(grid.clone());
    let mut log = Vec::new();
    let mut initial_trunks = vec![None; n];

    let pool = match cfg.sampling {
        Sampling::Pooled => Some(process.sample_paths(derive_seed(cfg.seed, TAG_POOL), cfg.pool_size, 0)?),
        Sampling::Fresh => None,
    };
    let mut table = pool
        .as_ref()
        .map(|p| ContinuationTable::terminal(contract, &grid, &process.spots(n, p.states(n))));
    let mut previous: Option<MultitaskNet> = None;

    for k in (0..n).rev() {
        let tasks = grid.tasks(k);
        if tasks.is_empty() {
            log::debug!("date {k}: every level is trivial");
            policy.set_forced(k);
        } else {
            let mut net = new_net(k, dim, tasks.len(), cfg)?;
            if cfg.transfer && k > 0 {
                if let Some(prev) = &previous {
                    net.transfer_shared_from(prev)?;
                }
            }
            initial_trunks[k] = Some(net.params()[..net.trunk_len()].to_vec());
            let mut trainer = DateTrainer::new(k, &policy, cfg, net);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, TAG_BATCH), k as u64));
            for it in 0..cfg.iterations {
                let (losses, global) = match (&pool, &table) {
                    (Some(pool), Some(table)) => {
                        let rows = sample(&mut rng, pool.n_paths(), cfg.batch_size).into_vec();
                        let states = pool.states(k).select(Axis(0), &rows);
                        let spots = process.spots(k, states.view());
                        let (pp, pm) =
                            table.branch_payoffs_rows(contract, &grid, &spots, &trainer.levels, &rows)?;
                        trainer.step(states.view(), pp.view(), pm.view(), cfg.learning_rate)?
                    }
                    _ => {
                        let seed = derive_seed(derive_seed(cfg.seed, TAG_FRESH), k as u64);
                        let paths = process.fill_paths(
                            seed,
                            (it * cfg.batch_size) as u64,
                            cfg.batch_size,
                            k,
                        )?;
                        let t = continuation_table(process, contract, &grid, &policy, &paths, k)?;
                        let states = paths.states(k);
                        let spots = process.spots(k, states);
                        let (pp, pm) = t.branch_payoffs(contract, &grid, &spots, &trainer.levels)?;
                        trainer.step(states, pp.view(), pm.view(), cfg.learning_rate)?
                    }
                };
                log.push(TrainLogRow::new(
                    it,
                    Some(k),
                    &losses,
                    trainer.weights.weights(),
                    global,
                ));
            }
            log::info!(
                "date {k}: {} tasks, final global loss {:.6}",
                tasks.len(),
                log.last().map(|r| r.global_loss).unwrap_or(f64::NAN)
            );
            let DateTrainer {
                net,
                levels,
                features,
                ..
            } = trainer;
            if k > 0 {
                previous = Some(net.clone());
            }
            policy.set_net(k, DateNet::new(net, levels, features));
        }
        if k > 0 {
            if let (Some(pool), Some(t)) = (&pool, &table) {
                let states = pool.states(k);
                let spots = process.spots(k, states);
                table = Some(t.step_back(contract, &grid, &policy, states, &spots)?);
            }
        }
    }
    Ok(TrainOutput {
        policy,
        log,
        initial_trunks,
    })
}

fn train_sweeps(
    process: &dyn StateProcess,
    contract: &ContractSpec,
    grid: QGrid,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let n = grid.n_dates();
    let dim = process.dim();
    let mut policy = NetPolicy::new(grid.clone());
    let mut trainers: Vec<Option<DateTrainer>> = Vec::with_capacity(n);
    let mut initial_trunks = vec![None; n];
    for k in 0..n {
        let tasks = grid.tasks(k);
        if tasks.is_empty() {
            policy.set_forced(k);
            trainers.push(None);
            continue;
        }
        let net = new_net(k, dim, tasks.len(), cfg)?;
        initial_trunks[k] = Some(net.params()[..net.trunk_len()].to_vec());
        let trainer = DateTrainer::new(k, &policy, cfg, net);
        policy.set_net(
            k,
            DateNet::new(trainer.net.clone(), trainer.levels.clone(), trainer.features.clone()),
        );
        trainers.push(Some(trainer));
    }

    let validation_seed = derive_seed(cfg.seed, TAG_VALIDATION);
    let validation = process.sample_paths(validation_seed, cfg.validation_paths, 0)?;
    let sweep_seed = derive_seed(cfg.seed, TAG_SWEEP);
    let mut log = Vec::with_capacity(cfg.iterations);
    for sweep in 0..cfg.iterations {
        let paths: PathBatch =
            process.fill_paths(sweep_seed, (sweep * cfg.batch_size) as u64, cfg.batch_size, 0)?;
        let mut table = ContinuationTable::terminal(contract, &grid, &process.spots(n, paths.states(n)));
        let mut losses = Vec::new();
        let mut weights = Vec::new();
        let mut global = 0.0;
        for k in (0..n).rev() {
            let states = paths.states(k);
            let spots = process.spots(k, states);
            if let Some(trainer) = trainers[k].as_mut() {
                let (pp, pm) = table.branch_payoffs(contract, &grid, &spots, &trainer.levels)?;
                let (l, g) = trainer.step(states, pp.view(), pm.view(), cfg.learning_rate)?;
                losses.extend(l);
                weights.extend_from_slice(trainer.weights.weights());
                global += g;
                let d = policy.date_net_mut(k).expect("trained date has a network");
                d.net.clone_from(&trainer.net);
            }
            if k > 0 {
                table = table.step_back(contract, &grid, &policy, states, &spots)?;
            }
        }
        let snapshot = evaluate_on_paths(&policy, process, contract, &grid, &validation, validation_seed)?;
        log::info!(
            "sweep {sweep}: validation price {:.4} ± {:.4}",
            snapshot.price,
            snapshot.ci_high - snapshot.price
        );
        let mut row = TrainLogRow::new(sweep, None, &losses, &weights, global);
        row.snapshot = Some(snapshot);
        log.push(row);
    }
    Ok(TrainOutput {
        policy,
        log,
        initial_trunks,
    })
}
