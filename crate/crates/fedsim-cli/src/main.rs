//! `fedsim`: run federated experiments from JSON configs, compare
//! strategies head to head, verify derivatives against finite differences,
//! and list the strategy registry.
//!
//! Exit codes are part of the contract: 0 success, 1 failed checks or
//! domain errors, 2 config/schema violations, 3 divergence, 4 IO.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use fedsim_core::config::{self, ExperimentConfig};
use fedsim_core::gradcheck::run_gradcheck;
use fedsim_core::{registry, FedError, Result};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated-learning strategy laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.jsonl, summary.json, curves.csv.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, created if missing.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Worker threads for client updates (default: FEDSIM_WORKERS or automatic).
        #[arg(long)]
        workers: Option<usize>,
        /// Dot-path config override, e.g. --set engine.rounds=50. The value
        /// is parsed as JSON, falling back to a plain string.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run several configs and emit a CSV comparison table.
    Compare {
        /// Config files, one table row each.
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic derivatives against central finite differences.
    Gradcheck {
        /// Model family: linear, logistic, mlp, or all.
        #[arg(long, default_value = "all")]
        family: String,
        /// Random trials per op and family.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic gradient to demonstrate detection.
        #[arg(long)]
        corrupt: bool,
    },
    /// List registered strategies with hyperparameter keys and defaults.
    List,
}

fn main() -> ExitCode {
    // Die quietly when stdout closes early (e.g. `fedsim list | head`);
    // Rust ignores SIGPIPE by default, which would turn EPIPE into a panic.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e))
        }
    }
}

fn error_exit_code(e: &FedError) -> u8 {
    match e {
        FedError::Config(_) => 2,
        FedError::Divergence { .. } => 3,
        FedError::Io(_) | FedError::Csv { .. } => 4,
        FedError::Domain(_) => 1,
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run { config, seed, out, workers, set } => cmd_run(&config, seed, &out, workers, &set),
        Command::Compare { configs, workers, out } => cmd_compare(&configs, workers, out.as_deref()),
        Command::Gradcheck { family, trials, seed, corrupt } => cmd_gradcheck(&family, trials, seed, corrupt),
        Command::List => cmd_list(),
    }
}

fn resolve_workers(flag: Option<usize>) -> Result<usize> {
    if let Some(w) = flag {
        return Ok(w);
    }
    match std::env::var("FEDSIM_WORKERS") {
        Ok(v) => v.trim().parse().map_err(|_| {
            FedError::config(format!("FEDSIM_WORKERS: not a worker count: {v:?}"))
        }),
        Err(_) => Ok(0),
    }
}

/// Applies one `key=value` override into the raw config document; the key
/// is a dot path and missing intermediate objects are created.
fn apply_set(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| FedError::config(format!("--set {spec:?}: expected key=value")))?;
    if key.is_empty() {
        return Err(FedError::config(format!("--set {spec:?}: empty key")));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| FedError::config(format!("--set {key}: {part} is not an object")))?;
        cursor = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let last = parts[parts.len() - 1];
    let obj = cursor
        .as_object_mut()
        .ok_or_else(|| FedError::config(format!("--set {key}: parent of {last} is not an object")))?;
    obj.insert(last.to_string(), value);
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>, sets: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = if sets.is_empty() {
        ExperimentConfig::from_json(&text)?
    } else {
        let mut doc: Value = serde_json::from_str(&text)
            .map_err(|e| FedError::config(format!("{}: {e}", path.display())))?;
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        ExperimentConfig::from_json(&doc.to_string())?
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    out_dir: &Path,
    workers: Option<usize>,
    sets: &[String],
) -> Result<ExitCode> {
    let cfg = load_config(path, seed, sets)?;
    let workers = resolve_workers(workers)?;
    let run = cfg.run(workers)?;
    let summary = config::summarize(&cfg.strategy.name, &run, cfg.engine.target_loss);
    std::fs::create_dir_all(out_dir)?;
    config::write_metrics_jsonl(&out_dir.join("metrics.jsonl"), &run.records)?;
    config::write_summary_json(&out_dir.join("summary.json"), &summary)?;
    config::write_curves_csv(&out_dir.join("curves.csv"), &run.records)?;
    println!(
        "{}: {} rounds{}, mean test loss {:.6}, loss variance {:.6e}",
        summary.strategy,
        summary.rounds_run,
        if summary.stopped_early { " (stopped at target)" } else { "" },
        summary.mean_test_loss,
        summary.loss_variance,
    );
    println!("wrote metrics.jsonl, summary.json, curves.csv under {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn csv_opt(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn cmd_compare(configs: &[PathBuf], workers: Option<usize>, out: Option<&Path>) -> Result<ExitCode> {
    let workers = resolve_workers(workers)?;
    let mut table = String::from(
        "schema_version,config,strategy,mean_test_loss,loss_variance,rounds_to_target,total_floats_up,total_floats_down\n",
    );
    for path in configs {
        let cfg = load_config(path, None, &[])?;
        let run = cfg.run(workers)?;
        let s = config::summarize(&cfg.strategy.name, &run, cfg.engine.target_loss);
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.schema_version,
            path.display(),
            s.strategy,
            s.mean_test_loss,
            s.loss_variance,
            csv_opt(s.rounds_to_target),
            s.total_floats_up,
            s.total_floats_down,
        ));
    }
    match out {
        Some(p) => std::fs::write(p, &table)?,
        None => print!("{table}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(family: &str, trials: usize, seed: u64, corrupt: bool) -> Result<ExitCode> {
    let reports = run_gradcheck(Some(family), trials, seed, corrupt)?;
    if reports.is_empty() {
        println!("gradcheck: no trials requested, nothing to check");
        return Ok(ExitCode::SUCCESS);
    }
    println!("{:<24} {:>7} {:>13} {:>11}   result", "op", "trials", "max_rel_err", "tolerance");
    for r in &reports {
        println!(
            "{:<24} {:>7} {:>13.3e} {:>11.0e}   {}",
            r.op,
            r.trials,
            r.max_rel_err,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" },
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        println!("gradcheck: all {} checks passed", reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck: {} check(s) failed: {}", failed.len(), failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_list() -> Result<ExitCode> {
    println!("{:<14} {:<10} hyperparameters", "name", "category");
    for e in registry() {
        let hypers = if e.hypers.is_empty() {
            "(none)".to_string()
        } else {
            e.hypers
                .iter()
                .map(|(key, default, _)| format!("{key}={default}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!("{:<14} {:<10} {hypers}", e.name, e.category);
    }
    Ok(ExitCode::SUCCESS)
}
