//! Shape-only accounting: trainable parameters per method and per-exit
//! inference budgets, at DeiT-small geometry with 100 classes and at the toy
//! geometry.
//!
//! ```text
//! cargo run --release --example parameter_budget
//! ```

use fedacc::adapters::{param_breakdown, AdapterMethod};
use fedacc::backbone::BackboneConfig;
use fedacc::experiment::{params_table, render_params, ExperimentConfig};
use fedacc::federation::format_rounds_by_millions;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.preset = "deit-small".into();
    cfg.data.classes = 100;
    let deit = params_table(&cfg)?;
    print!("{}", render_params(&deit));

    println!("\naccumulator breakdown at deit-small:");
    for (part, n) in param_breakdown(&AdapterMethod::default(), &BackboneConfig::deit_small(), 100) {
        println!("  {part:<14} {n:>10}");
    }
    let acc = deit.rows.iter().find(|r| r.name == "accumulator").expect("row").params;
    println!("40 rounds of accumulator updates: {}", format_rounds_by_millions(40, acc));

    let toy = params_table(&ExperimentConfig::default())?;
    println!();
    print!("{}", render_params(&toy));
    Ok(())
}
