//! Helpers shared by the integration test targets.

#![allow(dead_code)]

pub mod suites;

use fedacc::adapters::{init_trainable, AdapterMethod, ExitModel, MethodKind};
use fedacc::backbone::{Backbone, BackboneConfig};
use fedacc::numerics::{NumericError, ParamSet, Tape, Tensor, Var};
use fedacc::rng::{normal, stream};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

type Build<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, NumericError> + 'a;

/// Worst relative error between tape gradients and central differences of
/// the scalar `build(inputs)`, over all inputs.
pub fn check_inputs(build: &Build<'_>, inputs: &[Tensor<f64>]) -> Result<f64, NumericError> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, NumericError> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(build(&tape, &vars)?.value().item())
    };
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&tape, &leaves)?;
    let grads = tape.gradients(&out)?;
    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(leaf) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[k].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Contracts `y` against a fixed random tensor so every output element matters.
pub fn project<'t>(y: &Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, NumericError> {
    let mut r = stream(seed, "projection", &[]);
    let w = y.tape().constant(normal::<f64>(y.shape(), 1.0, &mut r));
    y.mul(&w)?.sum()
}

fn rand_t(shape: &[usize], seed: u64, tag: u64) -> Tensor<f64> {
    normal(shape, 1.0, &mut stream(seed, "gradcheck-input", &[tag]))
}

/// Every differentiable primitive at seed `seed`; returns `(name, worst error)`.
pub fn primitive_errors(seed: u64) -> Result<Vec<(&'static str, f64)>, NumericError> {
    let (b, s, d, c) = (2, 3, 4, 5);
    let mut out = Vec::new();
    let mut run = |name, build: &Build<'_>, inputs: Vec<Tensor<f64>>| -> Result<(), NumericError> {
        out.push((name, check_inputs(build, &inputs)?));
        Ok(())
    };
    run(
        "matmul",
        &|_, v| project(&v[0].matmul(&v[1])?, seed),
        vec![rand_t(&[b, s, d], seed, 0), rand_t(&[d, c], seed, 1)],
    )?;
    run(
        "add",
        &|_, v| project(&v[0].add(&v[1])?, seed),
        vec![rand_t(&[b, d], seed, 2), rand_t(&[b, d], seed, 3)],
    )?;
    run(
        "add_broadcast",
        &|_, v| project(&v[0].add(&v[1])?, seed),
        vec![rand_t(&[b, s, d], seed, 4), rand_t(&[d], seed, 5)],
    )?;
    run(
        "mul",
        &|_, v| project(&v[0].mul(&v[1])?, seed),
        vec![rand_t(&[b, d], seed, 6), rand_t(&[b, d], seed, 7)],
    )?;
    run("scale", &|_, v| project(&v[0].scale(-1.7)?, seed), vec![rand_t(&[b, d], seed, 8)])?;
    run("gelu", &|_, v| project(&v[0].gelu()?, seed), vec![rand_t(&[b, s, d], seed, 9)])?;
    run("softmax", &|_, v| project(&v[0].softmax()?, seed), vec![rand_t(&[b, s, d], seed, 10)])?;
    run(
        "layer_norm",
        &|_, v| project(&v[0].layer_norm(&v[1], &v[2])?, seed),
        vec![rand_t(&[b, s, d], seed, 11), rand_t(&[d], seed, 12), rand_t(&[d], seed, 13)],
    )?;
    run(
        "attention",
        &|_, v| project(&v[0].attention(2)?, seed),
        vec![rand_t(&[b, s, 3 * d], seed, 14)],
    )?;
    run("sum", &|_, v| v[0].mul(&v[0])?.sum(), vec![rand_t(&[b, d], seed, 15)])?;
    run("mean", &|_, v| v[0].mul(&v[0])?.mean(), vec![rand_t(&[b, s, d], seed, 16)])?;
    let labels: Vec<usize> = (0..b).map(|i| (seed as usize + 3 * i) % c).collect();
    run(
        "cross_entropy",
        &move |_, v| v[0].cross_entropy(&labels),
        vec![rand_t(&[b, c], seed, 17)],
    )?;
    let idx = seed as usize % s;
    run(
        "select_token",
        &move |_, v| project(&v[0].select_token(idx)?, seed),
        vec![rand_t(&[b, s, d], seed, 18)],
    )?;
    run(
        "replace_token",
        &move |_, v| project(&v[0].replace_token(idx, &v[1])?, seed),
        vec![rand_t(&[b, s, d], seed, 19), rand_t(&[b, d], seed, 20)],
    )?;
    run(
        "concat_seq",
        &|_, v| project(&v[0].concat_seq(&v[1])?, seed),
        vec![rand_t(&[b, s, d], seed, 21), rand_t(&[b, 2, d], seed, 22)],
    )?;
    run(
        "row",
        &move |_, v| project(&v[0].row(idx)?, seed),
        vec![rand_t(&[s, d], seed, 23)],
    )?;
    run("expand", &|_, v| project(&v[0].expand(b)?, seed), vec![rand_t(&[d], seed, 24)])?;
    run(
        "stack_tokens",
        &|_, v| project(&Var::stack_tokens(&[v[0].clone(), v[1].clone(), v[0].clone()])?, seed),
        vec![rand_t(&[b, d], seed, 25), rand_t(&[b, d], seed, 26)],
    )?;
    run(
        "reshape",
        &|_, v| project(&v[0].reshape(&[b * s, d])?, seed),
        vec![rand_t(&[b, s, d], seed, 27)],
    )?;
    Ok(out)
}

/// A small backbone whose every parameter is O(1), so gradients are far from roundoff.
pub fn gradcheck_backbone(seed: u64) -> Backbone<f64> {
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
    let mut bb = Backbone::<f64>::init(&cfg, seed).expect("valid config");
    randomize(&mut bb.params, seed, "backbone");
    bb.freeze();
    bb
}

pub fn randomize(params: &mut ParamSet<f64>, seed: u64, tag: &str) {
    let mut r = stream(seed, tag, &[]);
    for p in params.iter_mut() {
        let shape = p.value().shape().to_vec();
        *p.value_mut() = normal(&shape, 0.3, &mut r);
    }
}

/// Method exercised by composed-loss seed `seed`: cycles through every kind,
/// with parallel adapters on every other accumulator.
pub fn gradcheck_method(seed: u64) -> AdapterMethod {
    let kinds = [
        MethodKind::Accumulator,
        MethodKind::LwLinear,
        MethodKind::LwMlp,
        MethodKind::FullFineTune,
    ];
    let mut m = AdapterMethod::of(kinds[(seed % 4) as usize]);
    m.with_pa = m.kind == MethodKind::Accumulator && seed.is_multiple_of(8);
    m
}

/// Worst relative error of the exit-`l` cross-entropy gradient over every
/// trainable tensor, with `l` and the method chosen by `seed`.
pub fn composed_error(seed: u64) -> Result<f64, NumericError> {
    let bb = gradcheck_backbone(seed);
    let method = gradcheck_method(seed);
    let classes = 3;
    let mut trainable = init_trainable(&method, &bb, classes, seed).expect("valid method");
    randomize(&mut trainable, seed, "trainable");
    let model = ExitModel::new(&bb, &method);
    let exit = 1 + (seed as usize) % bb.cfg.depth;
    let images = normal::<f64>(&[2, 1, 8, 8], 1.0, &mut stream(seed, "images", &[]));
    let labels = [seed as usize % classes, (seed as usize + 1) % classes];
    let loss_of = |params: &ParamSet<f64>| -> Result<f64, NumericError> {
        let tape = Tape::new();
        Ok(model.logits_at(&tape, params, &images, exit)?.cross_entropy(&labels)?.value().item())
    };

    let mut analytic = trainable.clone();
    analytic.zero_grad();
    let tape = Tape::new();
    let loss = model.logits_at(&tape, &analytic, &images, exit)?.cross_entropy(&labels)?;
    tape.backward(&loss, &mut analytic)?;

    let mut worst = 0.0f64;
    let names: Vec<String> = trainable.names().map(str::to_string).collect();
    for name in names {
        let g = analytic.get(&name).expect("same names").grad.data().to_vec();
        let mut numeric = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let mut plus = trainable.clone();
            plus.get_mut(&name).unwrap().value_mut().data_mut()[i] += FD_STEP;
            let mut minus = trainable.clone();
            minus.get_mut(&name).unwrap().value_mut().data_mut()[i] -= FD_STEP;
            numeric.push((loss_of(&plus)? - loss_of(&minus)?) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_error(&g, &numeric));
    }
    Ok(worst)
}

/// Runs the full gradient suite over `seeds`; returns the worst error seen and where.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Result<(f64, String), NumericError> {
    let mut worst = (0.0, String::new());
    for seed in seeds {
        for (name, e) in primitive_errors(seed)? {
            if e > worst.0 {
                worst = (e, format!("{name} at seed {seed}"));
            }
        }
        let e = composed_error(seed)?;
        if e > worst.0 {
            worst = (e, format!("exit loss ({:?}) at seed {seed}", gradcheck_method(seed).kind));
        }
    }
    Ok(worst)
}
