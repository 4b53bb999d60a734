use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use swingnet::experiment::{
    echo_config, load_config, run_compare, run_curve, run_price, run_train, write_csv, ExperimentConfig, Method,
};
use swingnet::Error;

#[derive(Parser)]
#[command(name = "swingnet", version, about = "Swing contract pricing with backward multitask networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; presets apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Contract preset (base, benchmark, contract1, contract2, contract3, penalty).
    #[arg(long)]
    preset: Option<String>,
    /// Model preset (one_factor, three_factor).
    #[arg(long)]
    model: Option<String>,
    /// Output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set training.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration and list every problem.
    Validate(Common),
    /// Train one weighting scheme and save its checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "SMAG")]
        scheme: String,
    },
    /// Value a saved checkpoint (or fit and value LS).
    Price {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "SMAG")]
        scheme: String,
    },
    /// Train and value every configured scheme on one valuation seed.
    Compare(Common),
    /// Sweep-mode learning curves for every configured network scheme.
    Curve(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut overrides = Vec::new();
    if let Some(p) = &common.preset {
        overrides.push(format!("preset={p}"));
    }
    if let Some(m) = &common.model {
        overrides.push(format!("model_preset={m}"));
    }
    if let Some(o) = &common.output {
        overrides.push(format!("output={}", toml_string(&o.to_string_lossy())));
    }
    overrides.extend(common.overrides.iter().cloned());
    load_config(common.config.as_deref(), &overrides)
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn report_config_error(e: &Error) {
    match e {
        Error::Config(findings) => {
            eprintln!("invalid configuration:");
            for f in findings {
                eprintln!("  - {f}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

fn config_or_exit(common: &Common) -> Result<ExperimentConfig, ExitCode> {
    load(common).map_err(|e| {
        report_config_error(&e);
        ExitCode::from(2)
    })
}

fn parse_method(s: &str) -> anyhow::Result<Method> {
    s.parse::<Method>().map_err(anyhow::Error::msg)
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Validate(common) => {
            let cfg = match config_or_exit(&common) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            println!("ok: {} ({} dates, {} factor(s))", cfg.name, cfg.model.dates, cfg.model.alpha.len());
        }
        Command::Train { common, scheme } => {
            let cfg = match config_or_exit(&common) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            let Method::Net(scheme) = parse_method(&scheme)? else {
                bail!("LS has nothing to train; use `price --scheme LS`");
            };
            echo_config(&cfg)?;
            let out = run_train(&cfg, scheme)?;
            println!(
                "trained {scheme}: {} log rows, checkpoint in {}",
                out.log.len(),
                swingnet::experiment::policy_dir(&cfg, scheme).display()
            );
        }
        Command::Price { common, scheme } => {
            let cfg = match config_or_exit(&common) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            let method = parse_method(&scheme)?;
            echo_config(&cfg)?;
            let row = run_price(&cfg, method).with_context(|| format!("pricing {method}"))?;
            let path = cfg.output.join(format!("price_{method}.csv"));
            write_csv(&path, "price-table", std::slice::from_ref(&row))?;
            println!("{method}: {:.4} [{:.4}, {:.4}] -> {}", row.price, row.ci_low, row.ci_high, path.display());
        }
        Command::Compare(common) => {
            let cfg = match config_or_exit(&common) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            echo_config(&cfg)?;
            let rows = run_compare(&cfg)?;
            let path = cfg.output.join("compare.csv");
            write_csv(&path, "price-table", &rows)?;
            for r in &rows {
                println!("{:>5}: {:.4} ± {:.4}", r.scheme, r.price, r.stderr);
            }
            println!("-> {}", path.display());
        }
        Command::Curve(common) => {
            let cfg = match config_or_exit(&common) {
                Ok(c) => c,
                Err(code) => return Ok(code),
            };
            echo_config(&cfg)?;
            let rows = run_curve(&cfg)?;
            let path = cfg.output.join("curve.csv");
            write_csv(&path, "curve", &rows)?;
            println!("{} curve points -> {}", rows.len(), path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
