use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedacc::experiment::{
    build_report, params_table, render_params, render_report, run_personalize, run_pretrain, run_train,
    ExperimentConfig, ExperimentError, RESOLVED_CONFIG,
};

/// Desk-scale federated adaptation of a frozen transformer.
///
/// Any config key can be overridden with a flag of the same dotted name,
/// e.g. `--federation.rounds 50` or `--method.kind=lw_linear`.
#[derive(Parser)]
#[command(name = "fedacc", version)]
struct Cli {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the backbone, writing its checkpoint.
    Pretrain,
    /// Run federated training into `output_dir`.
    Train {
        /// Maximum concurrent client simulations.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Personalize clients of a finished multi-tier run.
    Personalize {
        /// Run directory; its resolved config is the base config unless --config is given.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print trainable-parameter counts and per-exit budgets.
    Params {
        /// Emit JSON instead of markdown.
        #[arg(long)]
        json: bool,
    },
    /// Compare finished runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Target mean accuracy for comms-to-target; defaults to the best layer-wise linear run.
        #[arg(long)]
        target: Option<f64>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config keys without a section, overridable as `--seed 3`.
const TOP_LEVEL_KEYS: &[&str] = &["seed", "output_dir"];

/// Removes `--a.b=v` and `--a.b v` pairs, returning the remaining args and the overrides.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), ExperimentError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') && !TOP_LEVEL_KEYS.contains(&key) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| ExperimentError::Config(vec![format!("--{key} needs a value")]))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), ExperimentError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), ExperimentError> {
    let load = |base: Option<&Path>| ExperimentConfig::load(cli.config.as_deref().or(base), overrides);
    match &cli.command {
        Command::Pretrain => {
            let outcome = run_pretrain(&load(None)?)?;
            println!("{}", serde_json::to_string_pretty(&outcome).expect("serializable"));
            if outcome.report.below_floor {
                log::warn!(
                    "holdout accuracy {:.4} is below the configured floor",
                    outcome.report.holdout_accuracy
                );
            }
        }
        Command::Train { jobs } => {
            let summary = run_train(&load(None)?, *jobs)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
        }
        Command::Personalize { run_dir, jobs } => {
            let cfg = load(Some(&run_dir.join(RESOLVED_CONFIG)))?;
            let report = run_personalize(&cfg, run_dir, *jobs)?;
            for m in &report.modes {
                println!(
                    "{:<18} {:>8} params  {}  improved {:.0}%",
                    serde_json::to_value(m.mode).expect("serializable").as_str().unwrap_or_default(),
                    m.trainable_params,
                    m.formatted,
                    100.0 * m.improved_fraction
                );
            }
        }
        Command::Params { json } => {
            let table = params_table(&load(None)?)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&table).expect("serializable"));
            } else {
                print!("{}", render_params(&table));
            }
        }
        Command::Report { run_dirs, target, out } => {
            let report = build_report(run_dirs, *target)?;
            write_out(out.as_deref(), &render_report(&report))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = split_overrides(std::env::args().collect()).and_then(|(args, overrides)| {
        let cli = Cli::parse_from(args);
        run(cli, &overrides)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({"error": {"category": e.category(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
