//! The accumulator's structural switches: adapter depth, CLS replacement and
//! the residual path into the exit head.
//!
//! ```text
//! cargo run --release --example ablations
//! ```

use fedacc::adapters::{count_trainable_params, init_trainable, AdapterMethod, ExitModel};
use fedacc::backbone::{Backbone, BackboneConfig};
use fedacc::numerics::Tape;
use fedacc::rng::{normal, stream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let deit = BackboneConfig::deit_small();
    for depth in [1, 2, 3] {
        let m = AdapterMethod {
            depth,
            ..AdapterMethod::default()
        };
        println!("depth {depth}: {} trainable at deit-small, 100 classes", count_trainable_params(&m, &deit, 100));
    }

    let mut bb = Backbone::<f32>::init(&BackboneConfig::toy(), 0)?;
    bb.freeze();
    let images = normal::<f32>(&[2, 1, 16, 16], 1.0, &mut stream(1, "images", &[]));
    let depth = bb.cfg.depth;
    let tape = Tape::inference();
    let (_, plain) = bb.forward(&tape, &images, depth)?;

    for (label, method) in [
        ("full", AdapterMethod::default()),
        (
            "no replace",
            AdapterMethod {
                replace: false,
                ..AdapterMethod::default()
            },
        ),
        (
            "no residual",
            AdapterMethod {
                residual: false,
                ..AdapterMethod::default()
            },
        ),
    ] {
        let mut params = init_trainable(&method, &bb, 8, 2)?;
        let mut r = stream(3, "values", &[]);
        for p in params.iter_mut() {
            let shape = p.value().shape().to_vec();
            *p.value_mut() = normal(&shape, 0.2, &mut r);
        }
        let model = ExitModel::new(&bb, &method);
        let trace = model.cls_trace(&tape, &params, &images, depth)?;
        let untouched = trace
            .tokens()
            .iter()
            .zip(plain.tokens())
            .all(|(a, b)| a.value() == b.value());
        let logits = model.logits_at(&tape, &params, &images, depth)?;
        println!(
            "{label:<12} backbone CLS stream untouched: {untouched:<5}  exit {depth} logits[0][..3] = {:?}",
            &logits.value().data()[..3]
        );
    }
    Ok(())
}
