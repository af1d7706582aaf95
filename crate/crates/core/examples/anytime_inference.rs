//! Anytime federated training with the low-level API: every local batch trains
//! a uniformly random exit, and one backbone pass then serves all exits.
//!
//! ```text
//! cargo run --release --example anytime_inference -- [rounds]
//! ```

use fedacc::adapters::{init_trainable, AdapterMethod, ExitModel};
use fedacc::backbone::{pretrain_backbone, BackboneConfig, PretrainOptions};
use fedacc::data::{partition, synth_dataset, PartitionScheme, PartitionSpec, SynthSpec};
use fedacc::federation::{build_profiles, evaluate_exits, run_federation, FederationConfig, RunOptions, Setting};
use fedacc::numerics::SgdConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rounds: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let cfg = BackboneConfig::toy();
    let synth = |n, label_map_seed, noise_seed| {
        synth_dataset(&SynthSpec {
            classes: 8,
            n,
            side: cfg.image_side,
            channels: cfg.channels,
            cluster_std: 0.3,
            label_map_seed,
            noise_seed,
        })
    };
    let (bb, _) = pretrain_backbone::<f32>(&cfg, &synth(4096, 1, 2)?, 6, 7, &PretrainOptions::default())?;
    let train = synth(2000, 11, 12)?;
    let test = synth(500, 11, 13)?;

    let fed = FederationConfig {
        num_clients: 20,
        sample_fraction: 0.2,
        rounds,
        setting: Setting::Anytime,
        eval_every: rounds.div_ceil(4),
        ..FederationConfig::default()
    };
    let shards = partition(
        &train,
        &PartitionSpec {
            scheme: PartitionScheme::Lda { alpha: 1.0 },
            num_clients: fed.num_clients,
            seed: 3,
        },
    )?;
    let profiles = build_profiles(&fed, cfg.depth)?;
    let method = AdapterMethod::default();
    let init = init_trainable(&method, &bb, 8, 9)?;
    let model = ExitModel::new(&bb, &method);
    let sgd = SgdConfig {
        base_lr: 5e-3,
        total_steps: rounds,
        ..SgdConfig::default()
    };

    let global = run_federation(
        &model,
        init,
        &train,
        &shards,
        &profiles,
        &fed,
        &sgd,
        &test,
        &RunOptions::default(),
        |report, _| {
            if let Some(acc) = &report.accuracy {
                println!("round {:>4}: loss {:.3}, mean accuracy {:.3}", report.round, report.mean_loss, acc.mean);
            }
            Ok(())
        },
    )?;

    let exits: Vec<usize> = (1..=cfg.depth).collect();
    let acc = evaluate_exits(&model, &global, &test, &exits)?;
    for (l, a) in acc.per_exit.iter().enumerate() {
        println!("exit {}: {:.3}", l + 1, a.unwrap_or(f64::NAN));
    }

    // One pass through the deepest exit yields a prediction at every exit.
    let (images, labels) = test.batch::<f32>(&[0, 1, 2, 3]);
    let preds = model.predict(&global, &images, &exits)?;
    println!("labels {labels:?}");
    for (l, p) in preds.iter().enumerate() {
        println!("exit {} predicts {p:?}", l + 1);
    }
    Ok(())
}
