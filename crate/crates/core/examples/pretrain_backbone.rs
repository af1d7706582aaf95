//! Pretrains the toy backbone on a synthetic 8-class task, freezes it and
//! writes a checkpoint that `train` and the other examples can load.
//!
//! ```text
//! cargo run --release --example pretrain_backbone -- [out.ckpt] [epochs]
//! ```

use fedacc::backbone::{count_backbone_params, pretrain_backbone, BackboneConfig, PretrainOptions};
use fedacc::data::{synth_dataset, SynthSpec};
use fedacc::persistence::{load_backbone, save_backbone};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "runs/backbone.ckpt".into());
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);

    let cfg = BackboneConfig::toy();
    let data = synth_dataset(&SynthSpec {
        classes: cfg.pretrain_classes,
        n: 4096,
        side: cfg.image_side,
        channels: cfg.channels,
        cluster_std: 0.3,
        label_map_seed: 1,
        noise_seed: 2,
    })?;
    let (bb, report) = pretrain_backbone::<f32>(&cfg, &data, epochs, 7, &PretrainOptions::default())?;
    println!(
        "{} parameters, {} epochs / {} steps, final loss {:.4}, holdout accuracy {:.3}",
        count_backbone_params(&cfg),
        report.epochs,
        report.steps,
        report.final_loss,
        report.holdout_accuracy
    );
    if report.below_floor {
        println!("warning: holdout accuracy is below the pretraining floor");
    }

    save_backbone(&out, &bb)?;
    let back = load_backbone::<f32>(&out)?;
    assert!(back.is_frozen() && back.params.bitwise_eq(&bb.params));
    println!("wrote frozen backbone to {out}");
    Ok(())
}
