//! Central finite differences against the tape's reverse sweep for the
//! cross-entropy loss at one exit of an accumulator-adapted backbone, in f64.
//!
//! ```text
//! cargo run --release --example gradient_check -- [exit]
//! ```

use fedacc::adapters::{init_trainable, AdapterMethod, ExitModel};
use fedacc::backbone::{Backbone, BackboneConfig};
use fedacc::numerics::{ParamSet, Tape};
use fedacc::rng::{normal, stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let exit: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2);
    let cfg = BackboneConfig {
        depth: 3,
        embed_dim: 8,
        num_heads: 2,
        mlp_ratio: 2,
        patch_size: 4,
        image_side: 8,
        channels: 1,
        pretrain_classes: 3,
    };
    let mut bb = Backbone::<f64>::init(&cfg, 0)?;
    bb.freeze();
    let method = AdapterMethod {
        with_pa: true,
        ..AdapterMethod::default()
    };
    let mut params = init_trainable(&method, &bb, 3, 1)?;
    // O(1) values keep every gradient well above roundoff.
    let mut r = stream(2, "values", &[]);
    for p in params.iter_mut() {
        let shape = p.value().shape().to_vec();
        *p.value_mut() = normal(&shape, 0.3, &mut r);
    }
    let model = ExitModel::new(&bb, &method);
    let images = normal::<f64>(&[2, 1, 8, 8], 1.0, &mut r);
    let labels = [0, 2];
    let loss = |p: &ParamSet<f64>| -> Result<f64, Box<dyn std::error::Error>> {
        let tape = Tape::new();
        Ok(model.logits_at(&tape, p, &images, exit)?.cross_entropy(&labels)?.value().item())
    };

    let tape = Tape::new();
    let mut analytic = params.clone();
    let value = model.logits_at(&tape, &analytic, &images, exit)?.cross_entropy(&labels)?;
    tape.backward(&value, &mut analytic)?;
    println!("exit {exit} loss {:.6}", value.value().item());

    let h = 1e-5;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = analytic.get(&name).expect("same names").grad.data().to_vec();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (i, gi) in g.iter().enumerate() {
            let mut plus = params.clone();
            plus.get_mut(&name).expect("exists").value_mut().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).expect("exists").value_mut().data_mut()[i] -= h;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
            diff += (gi - numeric).powi(2);
            norm += gi * gi + numeric * numeric;
        }
        let rel = diff.sqrt() / norm.sqrt().max(1e-12);
        println!("{name:<28} {:>5} values  relative error {rel:.2e}", g.len());
    }
    Ok(())
}
