//! Acceptance report: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits nonzero if any criterion fails.
//!
//! Criteria 4, 5, 8, 9 and 10 pretrain the toy backbone and run full
//! federated experiments; expect a few minutes on one core.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::suites::*;
use common::{gradient_suite, FD_TOLERANCE};
use fedacc::adapters::{count_trainable_params, AdapterMethod, MethodKind};
use fedacc::backbone::{block_param_count, BackboneConfig};
use fedacc::experiment::{
    params_table, read_metrics, run_personalize, run_pretrain, run_train, ExperimentConfig, TrainSummary,
    METRICS_FILE,
};
use fedacc::federation::{comms_cost, format_rounds_by_millions, Direction, PersonalizeMode};
use fedacc::experiment::report::{comms_to_target, read_summary};
use fedacc::numerics::{ParamSet, Tensor};
use fedacc::persistence;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(value: f64, reference: f64, rel: f64) -> bool {
    ((value - reference) / reference).abs() <= rel
}

fn c1_param_counts() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.preset = "deit-small".into();
    cfg.data.classes = 100;
    let t = params_table(&cfg).map_err(|e| e.to_string())?;
    let get = |n: &str| t.rows.iter().find(|r| r.name == n).map(|r| r.params).unwrap_or(0);
    let (lin, tok, mlp, pa, fft, acc) = (
        get("lw_linear"),
        get("client_token"),
        get("lw_mlp"),
        get("parallel_adapter"),
        get("full_fine_tune"),
        get("accumulator"),
    );
    ensure(lin == 462_000, format!("LwLinear {lin} != 462000"))?;
    ensure(tok == 384, format!("ClientToken {tok} != 384"))?;
    ensure(mlp == 8_940_720 && within(mlp as f64, 8.95e6, 0.002), format!("LwMlp {mlp}"))?;
    ensure(pa == 595_200 && within(pa as f64, 0.60e6, 0.01), format!("ParallelAdapter {pa}"))?;
    ensure(fft == t.backbone_params + mlp, format!("FullFineTune {fft} != backbone + LwMlp heads"))?;
    ensure(within(fft as f64, 30.62e6, 0.005), format!("FullFineTune {fft} not within 0.5% of 30.62M"))?;
    Ok(format!(
        "lw_linear {lin}, client_token {tok}, lw_mlp {mlp}, pa(r=64) {pa}, full_fine_tune {fft}; accumulator {acc} (reported, not asserted)"
    ))
}

fn c2_gradients() -> Verdict {
    let start = Instant::now();
    let (worst, at) = gradient_suite(0..100).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < FD_TOLERANCE, format!("relative error {worst:.2e} at {at}"))?;
    ensure(secs < 120.0, format!("took {secs:.0}s"))?;
    Ok(format!("worst relative error {worst:.2e} ({at}) over 100 seeds in {secs:.1}s"))
}

fn c3_fedavg() -> Verdict {
    let worst = fedavg_matches_exact_mean(1000, 1e-12)?;
    fedavg_identical_is_neutral(1000)?;
    Ok(format!(
        "1000 random update sets, worst scaled error {worst:.2e} <= 1e-12; identical updates bitwise neutral over 1000 sets"
    ))
}

fn c6_lda() -> Verdict {
    let start = Instant::now();
    let alphas = [0.1, 1.0, 1000.0];
    let oracle: Vec<f64> = alphas
        .iter()
        .enumerate()
        .map(|(i, &a)| mean_std(&lda_oracle(a, 1000, 100 + i as u64)).0)
        .collect();
    ensure(oracle[2] < 0.15 && oracle[0] > 0.5, format!("oracle means {oracle:?} do not support the thresholds"))?;
    let h: Vec<Vec<f64>> = alphas.iter().map(|&a| lda_heterogeneity(a, 0..100)).collect();
    let means: Vec<f64> = h.iter().map(|v| mean_std(v).0).collect();
    ensure(means[2] < 0.15, format!("alpha=1000 mean {:.3} >= 0.15", means[2]))?;
    ensure(means[0] > 0.5, format!("alpha=0.1 mean {:.3} <= 0.5", means[0]))?;
    let ordered = (0..100).filter(|&s| h[0][s] > h[1][s] && h[1][s] > h[2][s]).count();
    ensure(ordered >= 95, format!("ordering held for {ordered}/100 seeds"))?;
    for (hi, lo) in [(0, 1), (1, 2)] {
        let diffs: Vec<f64> = (0..100).map(|s| h[hi][s] - h[lo][s]).collect();
        let (m, sd) = mean_std(&diffs);
        let lower = m - 1.645 * sd / 10.0;
        ensure(lower > 0.0, format!("one-sided 95% bound {lower:.4} for alpha {} vs {}", alphas[hi], alphas[lo]))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "mean max-class share {:.3} > {:.3} > {:.3} (oracle {:.3} / {:.3} / {:.3}); ordered for {ordered}/100 seeds in {secs:.1}s",
        means[0], means[1], means[2], oracle[0], oracle[1], oracle[2]
    ))
}

fn c7_anytime() -> Verdict {
    let exits = anytime_consistency(50)?;
    Ok(format!("50 random cases bitwise invariant (exits 1..={})", exits.iter().max().unwrap()))
}

fn c11_persistence(dir: &Path) -> Verdict {
    checkpoint_roundtrip(1000)?;
    let mut params = ParamSet::<f32>::new();
    params.insert("a.weight", Tensor::from_f64(&[2, 3], &[1.0, -0.0, 3.5, 1e-40, -7.25, 0.1]).unwrap(), true);
    params.insert("b", Tensor::from_f64(&[1], &[f64::MAX.sqrt()]).unwrap(), false);
    let meta = BTreeMap::from([("kind".to_string(), "test".to_string())]);
    let path = dir.join("c11.ckpt");
    persistence::save(&path, &params, &meta).map_err(|e| e.to_string())?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = persistence::load::<f32>(&path).map_err(|e| e.to_string())?;
    ensure(back.params.bitwise_eq(&params) && back.meta == meta, "file roundtrip differs")?;
    persistence::save(&path, &back.params, &back.meta).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&path).map_err(|e| e.to_string())? == first, "re-save changed bytes")?;
    Ok("1000 property iterations: bitwise roundtrip at f32/f64, identical re-encoding, every single-byte blob corruption caught by CRC".into())
}

fn c12_ablations() -> Verdict {
    let (one, three) = (phi_block_params(1), phi_block_params(3));
    ensure(three == 3 * one, format!("depth 3 has {three} block params, depth 1 has {one}"))?;
    let deit = BackboneConfig::deit_small();
    let acc = |depth| {
        let m = AdapterMethod {
            depth,
            ..AdapterMethod::default()
        };
        count_trainable_params(&m, &deit, 100)
    };
    ensure(
        acc(3) - acc(1) == 2 * block_param_count(384, 1536),
        "deit-small depth-3 count is not two extra blocks",
    )?;
    no_replace_keeps_backbone(20)?;
    let changed = residual_matters(20)?;
    ensure(changed == 20, format!("residual toggle changed logits in {changed}/20 cases"))?;
    Ok(format!(
        "phi {one} -> {three} at depth 3; no-replace CLS history bitwise equal to plain forward (20 cases); no-residual changed logits at every exit (20/20)"
    ))
}

struct Shared {
    dir: PathBuf,
    base: ExperimentConfig,
    pretrain_accuracy: f64,
    runs: BTreeMap<MethodKind, (PathBuf, TrainSummary)>,
}

fn pretrain(dir: &Path) -> Result<Shared, String> {
    let mut base = ExperimentConfig::default();
    base.backbone.checkpoint = dir.join("backbone.ckpt");
    let out = run_pretrain(&base).map_err(|e| e.to_string())?;
    Ok(Shared {
        dir: dir.to_path_buf(),
        base,
        pretrain_accuracy: out.report.holdout_accuracy,
        runs: BTreeMap::new(),
    })
}

fn c4_frozen(s: &Shared) -> Verdict {
    let before = std::fs::read(&s.base.backbone.checkpoint).map_err(|e| e.to_string())?;
    let mut cfg = s.base.clone();
    cfg.federation.rounds = 50;
    cfg.output_dir = s.dir.join("c4");
    let summary = run_train(&cfg, 1).map_err(|e| e.to_string())?;
    let after = std::fs::read(&s.base.backbone.checkpoint).map_err(|e| e.to_string())?;
    ensure(before == after, "backbone checkpoint bytes changed")?;
    Ok(format!(
        "{} checkpoint bytes identical after 50 accumulator rounds (mean accuracy {:.3})",
        before.len(),
        summary.final_accuracy.mean
    ))
}

fn c5_determinism(s: &Shared) -> Verdict {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_fedacc");
    let mut cfg = s.base.clone();
    cfg.federation.rounds = 40;
    cfg.output_dir = s.dir.join("c5-serial");
    let cfg_path = s.dir.join("c5.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(
            out.status.success(),
            format!("fedacc {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)),
        )
    };
    let serial = s.dir.join("c5-serial");
    let parallel = s.dir.join("c5-parallel");
    run(&["train", "--config", cfg_path.to_str().unwrap(), "--jobs", "1"])?;
    let echoed = serial.join("config.resolved.toml");
    run(&[
        "train",
        "--config",
        echoed.to_str().unwrap(),
        "--output_dir",
        parallel.to_str().unwrap(),
        "--jobs",
        "8",
    ])?;
    let a = std::fs::read(serial.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let b = std::fs::read(parallel.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    ensure(a == b, "metrics files differ between --jobs 1 and --jobs 8")?;
    let ga = std::fs::read(serial.join("global.ckpt")).map_err(|e| e.to_string())?;
    let gb = std::fs::read(parallel.join("global.ckpt")).map_err(|e| e.to_string())?;
    ensure(ga == gb, "global checkpoints differ")?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "40-round runs (--jobs 1 vs --jobs 8 from the echoed config): {} metrics bytes and the global checkpoint identical in {secs:.1}s",
        a.len()
    ))
}

fn train_methods(s: &mut Shared) -> Result<f64, String> {
    let start = Instant::now();
    for kind in [MethodKind::Accumulator, MethodKind::LwLinear, MethodKind::FullFineTune] {
        let mut cfg = s.base.clone();
        cfg.method = AdapterMethod::of(kind);
        cfg.output_dir = s.dir.join(kind.as_str());
        let summary = run_train(&cfg, 1).map_err(|e| format!("{}: {e}", kind.as_str()))?;
        s.runs.insert(kind, (cfg.output_dir.clone(), summary));
    }
    Ok(start.elapsed().as_secs_f64())
}

fn c8_ordering(s: &Shared, train_secs: f64, pretrain_secs: f64) -> Verdict {
    ensure(
        s.pretrain_accuracy >= 0.90,
        format!("pretrain holdout accuracy {:.3} < 0.90", s.pretrain_accuracy),
    )?;
    let get = |k| s.runs.get(&k).ok_or_else(|| format!("{k:?} run missing"));
    let (acc_dir, acc) = get(MethodKind::Accumulator)?;
    let (_, lin) = get(MethodKind::LwLinear)?;
    let (fft_dir, fft) = get(MethodKind::FullFineTune)?;
    let (am, lm) = (acc.final_accuracy.mean, lin.final_accuracy.mean);
    let ad = acc.final_accuracy.deepest().unwrap_or(f64::NAN);
    let fd = fft.final_accuracy.deepest().unwrap_or(f64::NAN);
    let a_ok = am - lm >= 0.05;
    let b_ok = ad >= fd - 0.05;

    let target = [acc, lin, fft].iter().map(|r| r.best_mean).fold(f64::INFINITY, f64::min);
    let reach = |dir: &PathBuf, summary: &TrainSummary| {
        read_metrics(dir.join(METRICS_FILE))
            .ok()
            .and_then(|rows| comms_to_target(&rows, summary.trainable_params, target))
    };
    let (ra, rf) = (reach(acc_dir, acc), reach(fft_dir, fft));
    let c_ok = matches!((&ra, &rf), (Some(a), Some(f)) if a.cum_params < f.cum_params);
    let total = train_secs + pretrain_secs;
    let detail = format!(
        "(a) mean acc {am:.3} vs lw_linear {lm:.3} [{}]; (b) deepest acc {ad:.3} vs full_fine_tune {fd:.3} [{}]; \
         (c) target {target:.3}: accumulator {} vs full_fine_tune {} [{}]; pretrain {:.3}; {total:.0}s",
        if a_ok { "ok" } else { "FAIL" },
        if b_ok { "ok" } else { "FAIL" },
        ra.as_ref().map_or("never".into(), |r| format!("{} params at round {}", r.cum_params, r.round)),
        rf.as_ref().map_or("never".into(), |r| format!("{} params at round {}", r.cum_params, r.round)),
        if c_ok { "ok" } else { "FAIL" },
        s.pretrain_accuracy,
    );
    ensure(a_ok && b_ok && c_ok && total < 1200.0, detail.clone())?;
    Ok(detail)
}

fn c9_comms(s: &Shared) -> Verdict {
    ensure(format_rounds_by_millions(40, 3_170_000) == "40×3.17", "table-style format")?;
    let mut checked = 0;
    for (kind, (dir, summary)) in &s.runs {
        let n = count_trainable_params(&AdapterMethod::of(*kind), &BackboneConfig::toy(), s.base.data.classes);
        ensure(summary.trainable_params == n, format!("{kind:?}: summary params {} != {n}", summary.trainable_params))?;
        let rows = read_metrics(dir.join(METRICS_FILE)).map_err(|e| e.to_string())?;
        for r in &rows {
            ensure(
                r.cum_params == comms_cost(r.round, n, Direction::Single),
                format!("{kind:?} round {}: {} != {} x {n}", r.round, r.cum_params, r.round),
            )?;
        }
        ensure(
            summary.total_comms == (summary.rounds * n) as u64,
            format!("{kind:?} total {}", summary.total_comms),
        )?;
        checked += rows.len();
    }
    let (_, acc) = &s.runs[&MethodKind::Accumulator];
    Ok(format!(
        "{checked} metric rows equal round x |w_PE|; accumulator total {} = {}",
        acc.total_comms,
        format_rounds_by_millions(acc.rounds, acc.trainable_params)
    ))
}

fn c10_personalization(s: &Shared) -> Verdict {
    let (dir, _) = &s.runs[&MethodKind::Accumulator];
    let mut cfg = read_summary(dir).map(|_| s.base.clone()).map_err(|e| e.to_string())?;
    cfg.output_dir = dir.clone();
    cfg.personalization.modes = vec![PersonalizeMode::ClientTokenOnly];
    ensure(cfg.personalization.epochs == 10 && cfg.personalization.severity == 3, "defaults changed")?;
    let report = run_personalize(&cfg, dir, 1).map_err(|e| e.to_string())?;
    let mode = &report.modes[0];
    let d = BackboneConfig::toy().embed_dim;
    let n = mode.clients.len();
    ensure(n == 20, format!("{n} clients"))?;
    for o in &mode.clients {
        ensure(
            o.changed_params == d && o.trainable_params == d,
            format!("client {}: changed {} of {} trainable", o.client, o.changed_params, o.trainable_params),
        )?;
    }
    let improved = mode.clients.iter().filter(|o| o.after > o.before).count();
    let not_worse = mode.clients.iter().filter(|o| o.after >= o.before).count();
    let detail = format!(
        "exactly {d} params changed for all clients; improved {improved}/20 (not worse {not_worse}/20); holdout {}",
        mode.formatted
    );
    ensure(improved * 10 >= 9 * n, detail.clone())?;
    Ok(detail)
}

fn run_one(results: &mut Vec<(u8, &'static str, Verdict, f64)>, id: u8, name: &'static str, f: impl FnOnce() -> Verdict) {
    let start = Instant::now();
    let verdict = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = start.elapsed().as_secs_f64();
    print_line(id, name, &verdict, secs);
    results.push((id, name, verdict, secs));
}

fn print_line(id: u8, name: &str, verdict: &Verdict, secs: f64) {
    let (tag, detail) = match verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {id:>2} {name} ({secs:.1}s): {detail}");
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let mut results = Vec::new();
    run_one(&mut results, 1, "parameter counts", c1_param_counts);
    run_one(&mut results, 2, "gradient suite", c2_gradients);
    run_one(&mut results, 3, "fedavg oracle", c3_fedavg);
    run_one(&mut results, 6, "lda heterogeneity", c6_lda);
    run_one(&mut results, 7, "anytime consistency", c7_anytime);
    run_one(&mut results, 11, "persistence", || c11_persistence(dir));
    run_one(&mut results, 12, "ablation structure", c12_ablations);

    let start = Instant::now();
    let shared = pretrain(dir);
    let pretrain_secs = start.elapsed().as_secs_f64();
    match shared {
        Err(e) => {
            for (id, name) in [(4, "frozen backbone"), (5, "determinism"), (8, "ordering"), (9, "comms"), (10, "personalization")] {
                let v = Err(format!("pretraining failed: {e}"));
                print_line(id, name, &v, 0.0);
                results.push((id, name, v, 0.0));
            }
        }
        Ok(mut s) => {
            run_one(&mut results, 4, "frozen backbone", || c4_frozen(&s));
            run_one(&mut results, 5, "determinism", || c5_determinism(&s));
            let train = train_methods(&mut s);
            match train {
                Ok(train_secs) => {
                    run_one(&mut results, 8, "ordering", || c8_ordering(&s, train_secs, pretrain_secs));
                    run_one(&mut results, 9, "comms accounting", || c9_comms(&s));
                    run_one(&mut results, 10, "personalization", || c10_personalization(&s));
                }
                Err(e) => {
                    for (id, name) in [(8, "ordering"), (9, "comms accounting"), (10, "personalization")] {
                        let v = Err(format!("training failed: {e}"));
                        print_line(id, name, &v, 0.0);
                        results.push((id, name, v, 0.0));
                    }
                }
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<u8> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("\nacceptance summary:");
    for (id, name, verdict, secs) in &results {
        print_line(*id, name, verdict, *secs);
    }
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
