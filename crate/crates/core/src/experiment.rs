//! Experiment configuration, presets and CSV artifacts.
//!
//! A configuration starts from a named contract preset and a named model
//! preset; a TOML file and then `key=value` overrides are merged on top
//! before the result is deserialized and cross-validated.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::contract::ContractSpec;
use crate::error::{Error, Result};
use crate::ls::{fit_ls, Basis, LsConfig};
use crate::market::{FactorModel, FactorModelParams, StateProcess};
use crate::trainer::{train_policy, NetPolicy, TrainConfig, TrainLogRow, TrainOutput, TrainingMode};
use crate::valuation::{evaluate_policy, ValuationResult};
use crate::volume::{QGrid, VolumeConstraints};
use crate::weighting::Scheme;

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CONTRACT_PRESETS: [&str; 6] = ["base", "benchmark", "contract1", "contract2", "contract3", "penalty"];
pub const MODEL_PRESETS: [&str; 2] = ["one_factor", "three_factor"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    /// Flat forward level, used when `forward_curve` is absent.
    pub forward: f64,
    /// `F_{0,t_k}` for `k = 0..=n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward_curve: Option<Vec<f64>>,
    pub t0: f64,
    /// Last exercise date `t_n`; dates are spaced uniformly on `[t0, maturity]`.
    pub maturity: f64,
    pub dates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractKindName {
    TakeOrPay,
    Penalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSection {
    pub kind: ContractKindName,
    pub strike: f64,
    pub q_min: i64,
    pub q_max: i64,
    /// Global bounds (take-or-pay) or the penalty-free band `[Q_A, Q_B]`.
    pub total_min: i64,
    pub total_max: i64,
    #[serde(default)]
    pub penalty_a: f64,
    #[serde(default)]
    pub penalty_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValuationSection {
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Configuration id written to the price tables.
    pub name: String,
    pub schemes: Vec<String>,
    pub output: PathBuf,
    pub model: ModelSection,
    pub contract: ContractSection,
    pub training: TrainConfig,
    pub ls: LsConfig,
    pub valuation: ValuationSection,
}

/// A pricing method: a network trained under a weighting scheme, or LS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Net(Scheme),
    Ls,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Net(s) => s.fmt(f),
            Method::Ls => f.write_str("LS"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("LS") {
            Ok(Method::Ls)
        } else {
            s.parse().map(Method::Net)
        }
    }
}

pub fn model_preset(name: &str) -> Result<ModelSection> {
    let (alpha, sigma, rho) = match name {
        "one_factor" => (vec![4.0], vec![0.7], vec![vec![1.0]]),
        "three_factor" => (
            vec![3.0; 3],
            vec![0.25; 3],
            (0..3)
                .map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.3 }).collect())
                .collect(),
        ),
        other => {
            return Err(Error::Config(vec![format!(
                "unknown model preset {other:?} (known: {})",
                MODEL_PRESETS.join(", ")
            )]))
        }
    };
    Ok(ModelSection {
        alpha,
        sigma,
        rho,
        forward: 20.0,
        forward_curve: None,
        t0: 0.0,
        maturity: 1.0,
        dates: 30,
    })
}

/// Contract preset on the given model preset.
pub fn preset(name: &str, model: &str) -> Result<ExperimentConfig> {
    let mut model = model_preset(model)?;
    let top = |strike, total_min, total_max| ContractSection {
        kind: ContractKindName::TakeOrPay,
        strike,
        q_min: 0,
        q_max: 1,
        total_min,
        total_max,
        penalty_a: 0.0,
        penalty_b: 0.0,
    };
    let contract = match name {
        "base" => top(20.0, 20, 25),
        "contract1" => top(19.0, 20, 25),
        "contract2" => top(20.0, 15, 25),
        "contract3" => top(20.0, 0, 25),
        "benchmark" => {
            model.dates = 365;
            ContractSection {
                q_max: 6,
                ..top(20.0, 140, 200)
            }
        }
        "penalty" => ContractSection {
            kind: ContractKindName::Penalty,
            penalty_a: 1.0,
            penalty_b: 1.0,
            ..top(20.0, 20, 25)
        },
        other => {
            return Err(Error::Config(vec![format!(
                "unknown preset {other:?} (known: {})",
                CONTRACT_PRESETS.join(", ")
            )]))
        }
    };
    Ok(ExperimentConfig {
        name: name.to_string(),
        schemes: vec!["SMAG".into(), "EW".into(), "UW".into(), "LS".into()],
        output: PathBuf::from("out"),
        model,
        contract,
        training: TrainConfig::default(),
        ls: LsConfig::default(),
        valuation: ValuationSection {
            paths: 2_000_000,
            seed: 7,
        },
    })
}

fn toml_err(e: impl fmt::Display) -> Error {
    Error::Toml(e.to_string())
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// `a.b.c=value` as a nested table; the value is read as TOML and falls
/// back to a plain string.
fn override_table(assignment: &str) -> Result<toml::Table> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override {assignment:?} is not key=value")]))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(vec![format!("override {assignment:?} has an empty key")]));
    }
    let mut table = toml::Table::new();
    table.insert(keys[keys.len() - 1].to_string(), value);
    for key in keys[..keys.len() - 1].iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(key.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

/// Build the effective configuration. Preset names come from `preset` /
/// `model_preset` overrides, then from the file's top-level keys of the same
/// name, then default to `base` on `one_factor`.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut from_file = match file {
        Some(p) => toml::from_str::<toml::Table>(&fs::read_to_string(p)?).map_err(toml_err)?,
        None => toml::Table::new(),
    };
    let mut patches = Vec::new();
    for o in overrides {
        patches.push(override_table(o)?);
    }
    let mut pick = |key: &str, default: &str| -> Result<String> {
        let mut chosen = from_file.remove(key);
        for p in patches.iter_mut() {
            if let Some(v) = p.remove(key) {
                chosen = Some(v);
            }
        }
        match chosen {
            None => Ok(default.to_string()),
            Some(toml::Value::String(s)) => Ok(s),
            Some(v) => Err(Error::Config(vec![format!("{key} must be a string, got {v}")])),
        }
    };
    let preset_name = pick("preset", "base")?;
    let model_name = pick("model_preset", "one_factor")?;
    let base = preset(&preset_name, &model_name)?;
    let mut table = toml::Table::try_from(&base).map_err(toml_err)?;
    merge(&mut table, from_file);
    for p in patches {
        merge(&mut table, p);
    }
    let cfg: ExperimentConfig = table.try_into().map_err(toml_err)?;
    let findings = cfg.validate();
    if findings.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(findings))
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(toml_err)
    }

    pub fn model_params(&self) -> FactorModelParams {
        let m = &self.model;
        let n = m.dates;
        let times: Vec<f64> = (0..=n)
            .map(|k| m.t0 + (m.maturity - m.t0) * k as f64 / n.max(1) as f64)
            .collect();
        FactorModelParams {
            alpha: m.alpha.clone(),
            sigma: m.sigma.clone(),
            rho: m.rho.clone(),
            forward: m.forward_curve.clone().unwrap_or_else(|| vec![m.forward; n + 1]),
            times,
        }
    }

    pub fn factor_model(&self) -> Result<FactorModel> {
        FactorModel::new(self.model_params())
    }

    pub fn contract_spec(&self) -> ContractSpec {
        let c = &self.contract;
        let n = self.model.dates;
        match c.kind {
            ContractKindName::TakeOrPay => ContractSpec::take_or_pay(
                c.strike,
                VolumeConstraints::firm(c.q_min, c.q_max, c.total_min, c.total_max, n),
            ),
            ContractKindName::Penalty => ContractSpec::penalty(
                c.strike,
                VolumeConstraints::penalty(c.q_min, c.q_max, n),
                c.penalty_a,
                c.penalty_b,
                c.total_min,
                c.total_max,
            ),
        }
    }

    pub fn methods(&self) -> std::result::Result<Vec<Method>, String> {
        self.schemes.iter().map(|s| s.parse()).collect()
    }

    /// Every violated constraint across all sections.
    pub fn validate(&self) -> Vec<String> {
        let mut findings = Vec::new();
        if let Err(e) = self.factor_model() {
            findings.push(e.to_string());
        }
        if let Some(curve) = &self.model.forward_curve {
            if curve.len() != self.model.dates + 1 {
                findings.push(format!(
                    "model.forward_curve needs {} entries (dates + 1), got {}",
                    self.model.dates + 1,
                    curve.len()
                ));
            }
        }
        if !(self.model.maturity > self.model.t0) {
            findings.push("model.maturity must exceed model.t0".to_string());
        }
        findings.extend(self.contract_spec().validate());
        findings.extend(self.training.validate());
        if self.valuation.paths == 0 {
            findings.push("valuation.paths must be positive".to_string());
        }
        match self.methods() {
            Err(e) => findings.push(e),
            Ok(m) if m.is_empty() => findings.push("schemes must list at least one method".to_string()),
            Ok(m) if m.contains(&Method::Ls) => {
                let dim = Basis::new(self.model.alpha.len(), self.ls.degree, self.ls.include_spot).len();
                if self.ls.train_paths < 10 * dim {
                    findings.push(format!(
                        "ls.train_paths ({}) must be at least 10 x basis dimension ({dim})",
                        self.ls.train_paths
                    ));
                }
            }
            Ok(_) => {}
        }
        findings
    }
}

/// One line of a price table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub config: String,
    pub scheme: String,
    pub price: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub paths: usize,
    pub seed: u64,
    pub wall_seconds: f64,
}

impl PriceRow {
    pub fn new(config: &str, method: Method, r: &ValuationResult, wall_seconds: f64) -> Self {
        Self {
            config: config.to_string(),
            scheme: method.to_string(),
            price: r.price,
            stderr: r.stderr,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            paths: r.paths,
            seed: r.seed,
            wall_seconds,
        }
    }
}

/// One line of a training log; `date` is empty on sweep summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub date: String,
    pub loss_mean: f64,
    pub loss_min: f64,
    pub loss_max: f64,
    pub weight_mean: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub global_loss: f64,
    pub price: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl From<&TrainLogRow> for LogRow {
    fn from(r: &TrainLogRow) -> Self {
        Self {
            iteration: r.iteration,
            date: r.date.map_or_else(|| "sweep".to_string(), |d| d.to_string()),
            loss_mean: r.loss_mean,
            loss_min: r.loss_min,
            loss_max: r.loss_max,
            weight_mean: r.weight_mean,
            weight_min: r.weight_min,
            weight_max: r.weight_max,
            global_loss: r.global_loss,
            price: r.snapshot.map(|s| s.price),
            ci_low: r.snapshot.map(|s| s.ci_low),
            ci_high: r.snapshot.map(|s| s.ci_high),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub scheme: String,
    pub price: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, kind: &str, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = format!("# swingnet {kind} schema v{CSV_SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let expected = format!("# swingnet {kind} schema v{CSV_SCHEMA_VERSION}");
    if text.lines().next() != Some(expected.as_str()) {
        return Err(Error::Usage(format!(
            "{} is not a {kind} v{CSV_SCHEMA_VERSION} table",
            path.display()
        )));
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn policy_dir(cfg: &ExperimentConfig, scheme: Scheme) -> PathBuf {
    cfg.output.join(format!("policy_{scheme}"))
}

fn training_for(cfg: &ExperimentConfig, scheme: Scheme) -> TrainConfig {
    TrainConfig {
        scheme,
        ..cfg.training.clone()
    }
}

/// Train one scheme, save its checkpoint and training log.
pub fn run_train(cfg: &ExperimentConfig, scheme: Scheme) -> Result<TrainOutput> {
    let model = cfg.factor_model()?;
    let contract = cfg.contract_spec();
    let training = training_for(cfg, scheme);
    let out = train_policy(&model, &contract, &training)?;
    let manifest = serde_json::json!({
        "config": cfg.name,
        "scheme": scheme.to_string(),
        "seed": training.seed,
        "model": cfg.model_params(),
        "contract": contract,
        "training": training,
    });
    out.policy.save(&policy_dir(cfg, scheme), &manifest)?;
    let log: Vec<LogRow> = out.log.iter().map(LogRow::from).collect();
    write_csv(&cfg.output.join(format!("train_log_{scheme}.csv")), "training-log", &log)?;
    Ok(out)
}

fn check_policy_matches(cfg: &ExperimentConfig, policy: &NetPolicy) -> Result<()> {
    if policy.grid().constraints() != &cfg.contract_spec().volume {
        return Err(Error::Checkpoint(
            "checkpoint volume constraints differ from the configuration".into(),
        ));
    }
    Ok(())
}

/// Value a saved network policy, or fit and value LS.
pub fn run_price(cfg: &ExperimentConfig, method: Method) -> Result<PriceRow> {
    let model = cfg.factor_model()?;
    let contract = cfg.contract_spec();
    let grid = QGrid::new(contract.volume)?;
    let start = Instant::now();
    let result = match method {
        Method::Net(scheme) => {
            let policy = NetPolicy::load(&policy_dir(cfg, scheme))?;
            check_policy_matches(cfg, &policy)?;
            value(&policy, &model, &contract, &grid, cfg)?
        }
        Method::Ls => {
            let policy = fit_ls(&model, &contract, &cfg.ls)?;
            value(&policy, &model, &contract, &grid, cfg)?
        }
    };
    Ok(PriceRow::new(&cfg.name, method, &result, start.elapsed().as_secs_f64()))
}

fn value(
    policy: &dyn crate::policy::DecisionPolicy,
    model: &dyn StateProcess,
    contract: &ContractSpec,
    grid: &QGrid,
    cfg: &ExperimentConfig,
) -> Result<ValuationResult> {
    evaluate_policy(policy, model, contract, grid, cfg.valuation.paths, cfg.valuation.seed)
}

/// Train (or fit) and value every configured method on a shared valuation seed.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<Vec<PriceRow>> {
    let methods = cfg.methods().map_err(|e| Error::Config(vec![e]))?;
    let mut rows = Vec::new();
    for method in methods {
        let start = Instant::now();
        if let Method::Net(scheme) = method {
            run_train(cfg, scheme)?;
        }
        let mut row = run_price(cfg, method)?;
        row.wall_seconds = start.elapsed().as_secs_f64();
        log::info!("{method}: {:.4} ± {:.4}", row.price, row.stderr);
        rows.push(row);
    }
    Ok(rows)
}

/// Sweep-mode learning curves for every network scheme.
pub fn run_curve(cfg: &ExperimentConfig) -> Result<Vec<CurveRow>> {
    let methods = cfg.methods().map_err(|e| Error::Config(vec![e]))?;
    let model = cfg.factor_model()?;
    let contract = cfg.contract_spec();
    let mut rows = Vec::new();
    for method in methods {
        let Method::Net(scheme) = method else {
            continue;
        };
        let training = TrainConfig {
            mode: TrainingMode::Sweep,
            ..training_for(cfg, scheme)
        };
        let out = train_policy(&model, &contract, &training)?;
        for r in &out.log {
            if let (None, Some(s)) = (r.date, r.snapshot) {
                rows.push(CurveRow {
                    iteration: r.iteration,
                    scheme: scheme.to_string(),
                    price: s.price,
                    ci_low: s.ci_low,
                    ci_high: s.ci_high,
                });
            }
        }
    }
    Ok(rows)
}

/// Write the effective configuration next to the artifacts.
pub fn echo_config(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}
