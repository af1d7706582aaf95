//! Multi-tier federated training through the experiment API: each client is
//! pinned to one exit (tiers balanced across clients), and the run directory
//! receives the resolved config, per-round metrics, a summary and the global
//! checkpoint.
//!
//! ```text
//! cargo run --release --example multi_tier -- [rounds] [method]
//! ```

use fedacc::adapters::{AdapterMethod, MethodKind};
use fedacc::experiment::{read_metrics, run_pretrain, run_train, ExperimentConfig, METRICS_FILE};
use fedacc::federation::build_profiles;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let rounds: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let kind = match args.next().as_deref() {
        None | Some("accumulator") => MethodKind::Accumulator,
        Some("lw_linear") => MethodKind::LwLinear,
        Some("lw_mlp") => MethodKind::LwMlp,
        Some("full_fine_tune") => MethodKind::FullFineTune,
        Some(other) => return Err(format!("unknown method {other}").into()),
    };
    let dir = tempfile::tempdir()?;

    let mut cfg = ExperimentConfig::default();
    cfg.backbone.checkpoint = dir.path().join("backbone.ckpt");
    cfg.pretrain.epochs = 6;
    cfg.output_dir = dir.path().join("run");
    cfg.method = AdapterMethod::of(kind);
    cfg.federation.rounds = rounds;
    cfg.federation.eval_every = rounds.div_ceil(5);

    let pre = run_pretrain(&cfg)?;
    println!("backbone holdout accuracy {:.3}", pre.report.holdout_accuracy);
    let profiles = build_profiles(&cfg.federation_config(), pre.backbone.depth)?;
    let tiers: Vec<usize> = profiles.iter().map(|p| p.tier).collect();
    println!("client tiers: {tiers:?}");

    let summary = run_train(&cfg, 1)?;
    for row in read_metrics(cfg.output_dir.join(METRICS_FILE))? {
        if let Some(mean) = row.acc_mean {
            let per_exit: Vec<String> = row.acc.iter().map(|a| a.map_or("-".into(), |v| format!("{v:.3}"))).collect();
            println!("round {:>4}: comms {:>9}  exits [{}]  mean {mean:.3}", row.round, row.cum_params, per_exit.join(", "));
        }
    }
    println!(
        "{}: {} trainable parameters, best mean {:.3} at round {}",
        kind.as_str(),
        summary.trainable_params,
        summary.best_mean,
        summary.best_mean_round
    );
    Ok(())
}
