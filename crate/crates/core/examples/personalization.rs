//! Trains a multi-tier accumulator, then personalizes clients on corrupted
//! local data: only the client token, or the whole adapter, at each client's
//! tier exit.
//!
//! ```text
//! cargo run --release --example personalization -- [rounds] [severity]
//! ```

use fedacc::experiment::{run_personalize, run_pretrain, run_train, ExperimentConfig};
use fedacc::federation::PersonalizeMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let rounds: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(150);
    let severity: u8 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let dir = tempfile::tempdir()?;

    let mut cfg = ExperimentConfig::default();
    cfg.backbone.checkpoint = dir.path().join("backbone.ckpt");
    cfg.output_dir = dir.path().join("run");
    cfg.federation.rounds = rounds;
    cfg.personalization.severity = severity;
    cfg.personalization.clients = 10;
    cfg.personalization.modes = vec![PersonalizeMode::ClientTokenOnly, PersonalizeMode::FullAdapter];

    run_pretrain(&cfg)?;
    let summary = run_train(&cfg, 1)?;
    println!("federated mean accuracy {:.3}", summary.final_accuracy.mean);

    let report = run_personalize(&cfg, &cfg.output_dir, 1)?;
    for mode in &report.modes {
        println!(
            "{:?}: {} trainable, holdout {} , improved for {:.0}% of clients",
            mode.mode,
            mode.trainable_params,
            mode.formatted,
            100.0 * mode.improved_fraction
        );
        for c in &mode.clients {
            println!(
                "  client {:>2} exit {}: {:.2} -> {:.2} ({} values changed)",
                c.client, c.exit, c.before, c.after, c.changed_params
            );
        }
    }
    Ok(())
}
