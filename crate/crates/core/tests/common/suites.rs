//! Property suites run both by `cargo test` targets and by the acceptance report.

use std::collections::BTreeMap;

use fedacc::adapters::{init_trainable, AdapterMethod, ExitModel, MethodKind};
use fedacc::backbone::{Backbone, BackboneConfig};
use fedacc::data::{heterogeneity, partition, Dataset, PartitionScheme, PartitionSpec};
use fedacc::federation::fedavg;
use fedacc::numerics::{ParamSet, Tape, Tensor};
use fedacc::persistence::{decode, encode, PersistError};
use fedacc::rng::{normal, stream};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;
use rand_distr::{Binomial, Dirichlet, Distribution};

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

/// One client update: parameter values by name, plus the example count.
type Update = (BTreeMap<String, Vec<f64>>, usize);

fn updates_strategy() -> impl Strategy<Value = Vec<Update>> {
    (1usize..4, 1usize..12)
        .prop_flat_map(|(tensors, len)| {
            let update = (
                prop::collection::vec(prop::collection::vec(-1e3f64..1e3, len), tensors),
                1usize..10_000,
            );
            prop::collection::vec(update, 1..10)
        })
        .prop_map(|raw| {
            raw.into_iter()
                .map(|(tensors, n)| {
                    let named = tensors
                        .into_iter()
                        .enumerate()
                        .map(|(i, v)| (format!("p{i}"), v))
                        .collect();
                    (named, n)
                })
                .collect()
        })
}

fn to_param_set(values: &BTreeMap<String, Vec<f64>>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, v) in values {
        p.insert(name.clone(), Tensor::from_f64(&[v.len()], v).unwrap(), true);
    }
    p
}

/// Exact rational weighted mean of one coordinate.
fn exact_mean(values: &[(f64, usize)]) -> BigRational {
    let mut num = BigRational::zero();
    let mut den = BigInt::zero();
    for &(w, n) in values {
        num += BigRational::from_float(w).expect("finite") * BigRational::from_integer(BigInt::from(n));
        den += BigInt::from(n);
    }
    num / BigRational::from_integer(den)
}

/// FedAvg against an exact rational oracle. The error at each coordinate is
/// scaled by the largest client magnitude there; returns the worst scaled error.
pub fn fedavg_matches_exact_mean(cases: u32, tolerance: f64) -> Result<f64, String> {
    let worst = std::cell::Cell::new(0.0f64);
    runner(cases)
        .run(&updates_strategy(), |updates| {
            let sets: Vec<(ParamSet<f64>, usize)> = updates.iter().map(|(v, n)| (to_param_set(v), *n)).collect();
            let out = fedavg(&sets).unwrap();
            for (name, first) in &updates[0].0 {
                for i in 0..first.len() {
                    let column: Vec<(f64, usize)> = updates.iter().map(|(v, n)| (v[name][i], *n)).collect();
                    let exact = exact_mean(&column);
                    let got = BigRational::from_float(out.value(name).unwrap().data()[i]).unwrap();
                    let scale = column.iter().map(|(w, _)| w.abs()).fold(1.0, f64::max);
                    let err = (got - exact).abs().to_f64().unwrap() / scale;
                    worst.set(worst.get().max(err));
                    prop_assert!(err <= tolerance, "{name}[{i}]: scaled error {err:e}");
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(worst.get())
}

/// FedAvg of identical sets returns that set bitwise, for any weights.
pub fn fedavg_identical_is_neutral(cases: u32) -> Result<(), String> {
    let strategy = (
        prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20),
        prop::collection::vec(1usize..10_000, 1..10),
    );
    runner(cases)
        .run(&strategy, |(values, weights)| {
            let set = to_param_set(&BTreeMap::from([("w".to_string(), values)]));
            let updates: Vec<_> = weights.iter().map(|&n| (set.clone(), n)).collect();
            prop_assert!(fedavg(&updates).unwrap().bitwise_eq(&set));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

#[derive(Clone, Debug)]
struct CkptCase {
    tensors: Vec<(String, Vec<usize>, bool, Vec<u64>)>,
    meta: BTreeMap<String, String>,
    wide: bool,
    corrupt_at: prop::sample::Index,
    corrupt_xor: u8,
}

fn ckpt_strategy() -> impl Strategy<Value = CkptCase> {
    let tensor = (prop::collection::vec(1usize..5, 0..4), any::<bool>()).prop_flat_map(|(shape, trainable)| {
        let numel = shape.iter().product::<usize>();
        (Just(shape), Just(trainable), prop::collection::vec(any::<u64>(), numel))
    });
    (
        prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9_]{1,5}){0,3}", tensor, 0..6),
        prop::collection::btree_map("[a-z_]{1,8}", "\\PC{0,12}", 0..4),
        any::<bool>(),
        any::<prop::sample::Index>(),
        1u8..=255,
    )
        .prop_map(|(tensors, meta, wide, corrupt_at, corrupt_xor)| CkptCase {
            tensors: tensors.into_iter().map(|(n, (s, t, v))| (n, s, t, v)).collect(),
            meta,
            wide,
            corrupt_at,
            corrupt_xor,
        })
}

fn blob_region(bytes: &[u8]) -> std::ops::Range<usize> {
    let header = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    8 + header..bytes.len() - 8
}

fn check_ckpt<T: fedacc::numerics::Element>(case: &CkptCase, from_bits: impl Fn(u64) -> T) -> Result<(), TestCaseError> {
    let mut params = ParamSet::<T>::new();
    for (name, shape, trainable, bits) in &case.tensors {
        let value = Tensor::new(shape.clone(), bits.iter().map(|&b| from_bits(b)).collect()).unwrap();
        params.insert(name.clone(), value, *trainable);
    }
    let bytes = encode(&params, &case.meta);
    let back = decode::<T>(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(back.params.bitwise_eq(&params));
    prop_assert_eq!(&back.meta, &case.meta);
    for p in params.iter() {
        prop_assert_eq!(back.params.get(&p.name).unwrap().trainable, p.trainable);
    }
    prop_assert_eq!(&encode(&back.params, &back.meta), &bytes);
    let blobs = blob_region(&bytes);
    if !blobs.is_empty() {
        let mut bad = bytes.clone();
        bad[blobs.start + case.corrupt_at.index(blobs.len())] ^= case.corrupt_xor;
        let crc_error = matches!(decode::<T>(&bad), Err(PersistError::Crc { .. }));
        prop_assert!(crc_error, "blob corruption not detected");
    }
    let mut bad_trailer = bytes.clone();
    let last = bad_trailer.len() - 1 - case.corrupt_at.index(8);
    bad_trailer[last] ^= case.corrupt_xor;
    let crc_error = matches!(decode::<T>(&bad_trailer), Err(PersistError::Crc { .. }));
    prop_assert!(crc_error, "trailer corruption not detected");
    Ok(())
}

/// Bitwise roundtrip at both precisions (arbitrary bit patterns, NaN payloads
/// included), byte-identical re-encoding, and CRC detection of any single
/// corrupted blob or trailer byte.
pub fn checkpoint_roundtrip(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&ckpt_strategy(), |case| {
            if case.wide {
                check_ckpt::<f64>(&case, f64::from_bits)
            } else {
                check_ckpt::<f32>(&case, |b| f32::from_bits(b as u32))
            }
        })
        .map_err(|e| e.to_string())
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn random_params(params: &mut ParamSet<f32>, seed: u64, tag: &str, std: f64, pred: impl Fn(&str) -> bool) {
    let mut r = stream(seed, tag, &[]);
    for p in params.iter_mut() {
        if pred(&p.name) {
            let shape = p.value().shape().to_vec();
            *p.value_mut() = normal(&shape, std, &mut r);
        }
    }
}

fn accumulator_variant(seed: u64) -> AdapterMethod {
    let mut r = stream(seed, "variant", &[]);
    AdapterMethod {
        depth: r.random_range(1..=3),
        replace: r.random(),
        residual: r.random(),
        replace_at_tokenizer: r.random(),
        with_pa: r.random(),
        ..AdapterMethod::of(MethodKind::Accumulator)
    }
}

fn random_backbone(seed: u64) -> Backbone<f32> {
    let mut bb = Backbone::<f32>::init(&BackboneConfig::toy(), seed).unwrap();
    random_params(&mut bb.params, seed, "backbone", 0.2, |_| true);
    bb.freeze();
    bb
}

/// Exit-`l` logits are bitwise unchanged when every backbone block deeper
/// than `l` and every `p′` row past `l` is redrawn. Returns the exits checked.
pub fn anytime_consistency(cases: u64) -> Result<Vec<usize>, String> {
    let mut exits = Vec::new();
    for case in 0..cases {
        let bb = random_backbone(case);
        let depth = bb.cfg.depth;
        let method = accumulator_variant(case);
        let mut trainable = init_trainable(&method, &bb, 8, case).unwrap();
        random_params(&mut trainable, case, "trainable", 0.2, |_| true);
        let images = normal::<f32>(&[3, 1, 16, 16], 1.0, &mut stream(case, "images", &[]));
        let exit = 1 + (case as usize) % (depth - 1);
        let logits = |bb: &Backbone<f32>, p: &ParamSet<f32>| {
            let tape = Tape::inference();
            ExitModel::new(bb, &method).logits_at(&tape, p, &images, exit).map(|v| bits(v.value()))
        };
        let base = logits(&bb, &trainable).map_err(|e| e.to_string())?;

        let mut bb2 = bb.clone();
        let deeper = |name: &str| {
            (exit + 1..=depth).any(|k| name.starts_with(&format!("backbone.blocks.{k}.")))
                || (exit + 1..=depth).any(|k| name.starts_with(&format!("pa.{k}.")))
        };
        random_params(&mut bb2.params, case + 1000, "deeper", 1.0, deeper);
        let mut t2 = trainable.clone();
        random_params(&mut t2, case + 1000, "deeper-pa", 1.0, deeper);
        let d = bb.cfg.embed_dim;
        let mut r = stream(case, "rows", &[]);
        for v in &mut t2.get_mut("acc.layer_pos").unwrap().value_mut().data_mut()[(exit + 1) * d..] {
            *v = r.random_range(-3.0..3.0);
        }
        let changed = logits(&bb2, &t2).map_err(|e| e.to_string())?;
        if base != changed {
            return Err(format!("case {case}: exit {exit} logits changed ({method:?})"));
        }
        exits.push(exit);
    }
    Ok(exits)
}

/// Number of scalars in the adapter's self-attention blocks.
pub fn phi_block_params(depth: usize) -> usize {
    let bb = Backbone::<f32>::init(&BackboneConfig::toy(), 0).unwrap();
    let m = AdapterMethod {
        depth,
        ..AdapterMethod::default()
    };
    init_trainable(&m, &bb, 8, 0)
        .unwrap()
        .iter()
        .filter(|p| p.name.starts_with("acc.blocks."))
        .map(|p| p.value().numel())
        .sum()
}

/// Without replacement the adapted backbone's CLS history equals the plain
/// forward bitwise, for `cases` random instances.
pub fn no_replace_keeps_backbone(cases: u64) -> Result<(), String> {
    for case in 0..cases {
        let bb = random_backbone(case);
        let method = AdapterMethod {
            replace: false,
            ..accumulator_variant(case)
        };
        let mut trainable = init_trainable(&method, &bb, 8, case).unwrap();
        random_params(&mut trainable, case, "trainable", 0.2, |n| !n.starts_with("pa."));
        let images = normal::<f32>(&[2, 1, 16, 16], 1.0, &mut stream(case, "images", &[]));
        let tape = Tape::inference();
        let depth = bb.cfg.depth;
        let adapted = ExitModel::new(&bb, &method)
            .cls_trace(&tape, &trainable, &images, depth)
            .map_err(|e| e.to_string())?;
        let (_, plain) = bb.forward(&tape, &images, depth).map_err(|e| e.to_string())?;
        for (l, (a, b)) in adapted.tokens().iter().zip(plain.tokens()).enumerate() {
            if bits(a.value()) != bits(b.value()) {
                return Err(format!("case {case}: CLS at layer {l} differs"));
            }
        }
    }
    Ok(())
}

/// Dropping the residual changes the logits on random nonzero instances.
/// Returns how many of `cases` instances changed at every exit.
pub fn residual_matters(cases: u64) -> Result<u64, String> {
    let mut changed = 0;
    for case in 0..cases {
        let bb = random_backbone(case);
        let on = AdapterMethod::default();
        let off = AdapterMethod {
            residual: false,
            ..AdapterMethod::default()
        };
        let mut trainable = init_trainable(&on, &bb, 8, case).unwrap();
        random_params(&mut trainable, case, "trainable", 0.2, |_| true);
        let images = normal::<f32>(&[2, 1, 16, 16], 1.0, &mut stream(case, "images", &[]));
        let all: Vec<usize> = (1..=bb.cfg.depth).collect();
        let run = |m: &AdapterMethod| {
            let tape = Tape::inference();
            ExitModel::new(&bb, m)
                .forward_exits(&tape, &trainable, &images, &all, None)
                .map(|v| v.iter().map(|x| bits(x.value())).collect::<Vec<_>>())
        };
        let a = run(&on).map_err(|e| e.to_string())?;
        let b = run(&off).map_err(|e| e.to_string())?;
        if a.iter().zip(&b).all(|(x, y)| x != y) {
            changed += 1;
        }
    }
    Ok(changed)
}

pub const LDA_CLIENTS: usize = 100;
pub const LDA_CLASSES: usize = 10;
pub const LDA_EXAMPLES: usize = 50_000;

/// Mean per-client max-class share of a Dirichlet-multinomial allocation,
/// sampled independently of the data module: per-class proportions from
/// `rand_distr::Dirichlet`, counts by a chain of binomials. Empty clients are
/// skipped. One value per trial.
pub fn lda_oracle(alpha: f64, trials: usize, seed: u64) -> Vec<f64> {
    let mut r = stream(seed, "lda-oracle", &[]);
    let per_class = LDA_EXAMPLES / LDA_CLASSES;
    let dirichlet = Dirichlet::<f64, LDA_CLIENTS>::new([alpha; LDA_CLIENTS]).unwrap();
    (0..trials)
        .map(|_| {
            let mut counts = vec![[0u64; LDA_CLASSES]; LDA_CLIENTS];
            for class in 0..LDA_CLASSES {
                let q = dirichlet.sample(&mut r);
                let (mut left, mut mass) = (per_class as u64, 1.0f64);
                for (k, client) in counts.iter_mut().enumerate() {
                    let take = if k + 1 == LDA_CLIENTS || mass <= 0.0 {
                        left
                    } else {
                        let p = (q[k] / mass).clamp(0.0, 1.0);
                        Binomial::new(left, p).unwrap().sample(&mut r)
                    };
                    client[class] = take;
                    left -= take;
                    mass -= q[k];
                }
            }
            let shares: Vec<f64> = counts
                .iter()
                .filter_map(|c| {
                    let total: u64 = c.iter().sum();
                    (total > 0).then(|| *c.iter().max().unwrap() as f64 / total as f64)
                })
                .collect();
            shares.iter().sum::<f64>() / shares.len() as f64
        })
        .collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Heterogeneity of the data module's LDA partition for each seed.
pub fn lda_heterogeneity(alpha: f64, seeds: std::ops::Range<u64>) -> Vec<f64> {
    let labels: Vec<usize> = (0..LDA_EXAMPLES).map(|i| i % LDA_CLASSES).collect();
    let ds = Dataset::new(Tensor::zeros(&[LDA_EXAMPLES, 1, 1, 1]), labels, LDA_CLASSES).unwrap();
    seeds
        .map(|seed| {
            let spec = PartitionSpec {
                scheme: PartitionScheme::Lda { alpha },
                num_clients: LDA_CLIENTS,
                seed,
            };
            heterogeneity(&partition(&ds, &spec).unwrap(), ds.labels(), LDA_CLASSES)
        })
        .collect()
}
