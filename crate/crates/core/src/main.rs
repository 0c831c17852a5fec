//! `fedprune` command line: run, baseline, report, sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use fedprune::config::{parse_with_overrides, split_override};
use fedprune::engine::run_experiment;
use fedprune::error::{FedPruneError, Result};
use fedprune::importance::Method;
use fedprune::masks::Pattern;
use fedprune::metrics::{report, write_metrics};
use fedprune::RunConfig;

/// Federated structured pruning simulator.
///
/// Config keys can be overridden with trailing `--key=value` arguments,
/// e.g. `fedprune run --config ref.toml --target_sparsity=0.3`.
#[derive(Parser, Debug)]
#[command(name = "fedprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write metrics.csv, config.toml and final.ckpt.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dense federated averaging: `run` with target_sparsity = 0.
    Baseline {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summarise metrics files, one row per run, sorted by sparsity.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Print JSON instead of a text table.
        #[arg(long)]
        json: bool,
    },
    /// Run the cartesian product of sparsities, methods and patterns, each
    /// into its own subdirectory of output_dir.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        sparsity: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        method: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        pattern: Vec<String>,
    },
}

type Overrides = Vec<(String, String)>;

/// Flags clap parses itself for each subcommand; every other `--key=value`
/// is a config override.
fn own_flags(subcommand: &str) -> &'static [&'static str] {
    match subcommand {
        "sweep" => &["config", "sparsity", "method", "pattern"],
        "report" => &["json"],
        _ => &["config"],
    }
}

/// Pulls `--key=value` config overrides out of the argument list, leaving
/// the subcommand's own flags for clap.
fn split_args(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let subcommand = args.iter().skip(1).find(|a| !a.starts_with('-')).cloned().unwrap_or_default();
    let own = own_flags(&subcommand);
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let key = a.strip_prefix("--").and_then(|b| b.split_once('=')).map(|(k, _)| k);
        match key {
            Some(k) if !own.contains(&k) => overrides.push(split_override(&a)?),
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| FedPruneError::Config(format!("cannot read {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut cfg = parse_with_overrides(&text, overrides)?;
    if let Ok(raw) = std::env::var("FEDPRUNE_THREADS") {
        let cap: usize =
            raw.parse().map_err(|_| FedPruneError::Config(format!("FEDPRUNE_THREADS=`{raw}` is not a number")))?;
        if cap > 0 {
            cfg.threads = if cfg.threads == 0 { cap } else { cfg.threads.min(cap) };
        }
    }
    Ok(cfg)
}

fn execute(cfg: &RunConfig) -> Result<()> {
    let dir = Path::new(&cfg.output_dir);
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.render())?;
    let out = run_experiment(cfg)?;
    write_metrics(&out.records, &dir.join("metrics.csv"))?;
    out.store.write_checkpoint(fs::File::create(dir.join("final.ckpt"))?)?;
    let last = out.records.last().expect("initial record always present");
    println!(
        "{}: rounds={} sparsity={} zero_param_ratio={:.4} eval_accuracy={:.4}",
        dir.display(),
        last.round,
        last.sparsity,
        last.zero_param_ratio,
        last.eval_accuracy
    );
    Ok(())
}

fn parse_enum<T: serde::de::DeserializeOwned>(raw: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| FedPruneError::Config(format!("unknown {what} `{raw}`")))
}

fn sweep(base: RunConfig, sparsity: &[f64], methods: &[String], patterns: &[String]) -> Result<()> {
    let methods: Vec<Method> = if methods.is_empty() {
        vec![base.method]
    } else {
        methods.iter().map(|m| parse_enum(m, "method")).collect::<Result<_>>()?
    };
    let patterns: Vec<Pattern> = if patterns.is_empty() {
        vec![base.pattern]
    } else {
        patterns.iter().map(|p| parse_enum(p, "pattern")).collect::<Result<_>>()?
    };
    let mut configs = Vec::new();
    for &s in sparsity {
        for &method in &methods {
            for &pattern in &patterns {
                let dir = Path::new(&base.output_dir).join(format!("s{s}_{}_{}", method.as_str(), pattern.as_str()));
                let cfg = RunConfig {
                    target_sparsity: s,
                    method,
                    pattern,
                    output_dir: dir.to_string_lossy().into_owned(),
                    // Runs are parallel; each one stays single-threaded.
                    threads: 1,
                    ..base.clone()
                };
                cfg.validate()?;
                configs.push(cfg);
            }
        }
    }
    configs.par_iter().map(execute).collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn dispatch(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    match cli.command {
        Command::Run { config } => execute(&load_config(config.as_deref(), overrides)?),
        Command::Baseline { config } => {
            let mut ov = overrides.to_vec();
            ov.push(("target_sparsity".into(), "0.0".into()));
            execute(&load_config(config.as_deref(), &ov)?)
        }
        Command::Report { csv, json } => {
            let rep = report(&csv)?;
            if json {
                println!("{}", rep.to_json());
            } else {
                print!("{}", rep.to_text());
            }
            Ok(())
        }
        Command::Sweep { config, sparsity, method, pattern } => {
            let base = load_config(config.as_deref(), overrides)?;
            sweep(base, &sparsity, &method, &pattern)
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_args(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match dispatch(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
