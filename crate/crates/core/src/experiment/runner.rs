use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{self, best_mean, comms_to_target, metrics_header, MetricsRow, TrainSummary};
use super::{
    io_error, DataSource, ExperimentConfig, ExperimentError, GLOBAL_CHECKPOINT, METRICS_FILE, RESOLVED_CONFIG,
    SUMMARY_FILE,
};
use crate::adapters::{
    count_trainable_params, init_trainable, pa_param_count, param_breakdown, AdapterMethod, ExitModel, MethodKind,
};
use crate::backbone::{count_backbone_params, pretrain_backbone, Backbone, BackboneConfig, PretrainReport};
use crate::data::{load_idx, partition, synth_dataset, ClientShard, Dataset, PartitionSpec, SynthSpec};
use crate::federation::{
    build_profiles, exit_budget, personal_split, personalize, run_federation, ExitBudget, ExitAccuracy,
    FederationError, PersonalizeMode, PersonalizeOutcome, RunOptions, Setting,
};
use crate::numerics::ParamSet;
use crate::persistence::{self, load_backbone, save_backbone};
use crate::rng::derive_seed;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    persistence::write_atomic(path, bytes)?;
    Ok(())
}

fn to_json<S: Serialize>(value: &S) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub backbone: BackboneConfig,
    pub backbone_params: usize,
    pub report: PretrainReport,
}

/// Pretrains (or, with zero epochs, randomly initializes) and freezes the
/// backbone, then writes the checkpoint plus `<checkpoint>.metrics.json`.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome, ExperimentError> {
    cfg.validate()?;
    let bb_cfg = cfg.backbone.resolve().map_err(|e| ExperimentError::Config(vec![e]))?;
    let seed = derive_seed(cfg.seed, "pretrain", &[]);
    let (bb, report) = if cfg.pretrain.epochs == 0 {
        let mut bb = Backbone::<f32>::init(&bb_cfg, seed)?;
        bb.freeze();
        let report = PretrainReport {
            epochs: 0,
            steps: 0,
            final_loss: f64::NAN,
            holdout_accuracy: f64::NAN,
            below_floor: false,
        };
        (bb, report)
    } else {
        let data = synth_dataset(&SynthSpec {
            classes: bb_cfg.pretrain_classes,
            n: cfg.pretrain.n,
            side: bb_cfg.image_side,
            channels: bb_cfg.channels,
            cluster_std: cfg.pretrain.cluster_std,
            label_map_seed: cfg.pretrain.label_map_seed,
            noise_seed: cfg.pretrain.noise_seed,
        })?;
        pretrain_backbone::<f32>(&bb_cfg, &data, cfg.pretrain.epochs, seed, &cfg.pretrain.options)?
    };
    let ckpt = &cfg.backbone.checkpoint;
    save_backbone(ckpt, &bb)?;
    let outcome = PretrainOutcome {
        checkpoint: ckpt.clone(),
        backbone: bb_cfg.clone(),
        backbone_params: count_backbone_params(&bb_cfg),
        report,
    };
    write_file(&ckpt.with_extension("metrics.json"), &to_json(&outcome))?;
    write_file(&ckpt.with_extension("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(outcome)
}

pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
    /// Source of personal examples for personalization.
    pub personal_pool: Dataset,
}

pub fn load_datasets(cfg: &ExperimentConfig, bb: &BackboneConfig) -> Result<Datasets, ExperimentError> {
    let d = &cfg.data;
    let sets = match d.source {
        DataSource::Synthetic => {
            let gen = |n, noise_seed| {
                synth_dataset(&SynthSpec {
                    classes: d.classes,
                    n,
                    side: bb.image_side,
                    channels: bb.channels,
                    cluster_std: d.cluster_std,
                    label_map_seed: d.label_map_seed,
                    noise_seed,
                })
            };
            Datasets {
                train: gen(d.n_train, d.noise_seed)?,
                test: gen(d.n_test, derive_seed(d.noise_seed, "test", &[]))?,
                personal_pool: gen(d.n_personal, derive_seed(d.noise_seed, "personal", &[]))?,
            }
        }
        DataSource::Idx => {
            let path = |p: &Option<PathBuf>| p.clone().expect("validated");
            let train = load_idx(path(&d.train_images), path(&d.train_labels))?;
            let test = load_idx(path(&d.test_images), path(&d.test_labels))?;
            Datasets {
                personal_pool: test.clone(),
                train,
                test,
            }
        }
    };
    for (name, ds) in [("train", &sets.train), ("test", &sets.test)] {
        if ds.side() != bb.image_side || ds.channels() != bb.channels {
            return Err(ExperimentError::Config(vec![format!(
                "{name} images are {}x{}x{}, backbone expects {}x{}x{}",
                ds.channels(),
                ds.side(),
                ds.side(),
                bb.channels,
                bb.image_side,
                bb.image_side
            )]));
        }
    }
    Ok(sets)
}

fn load_frozen_backbone(cfg: &ExperimentConfig) -> Result<Backbone<f32>, ExperimentError> {
    let expected = cfg.backbone.resolve().map_err(|e| ExperimentError::Config(vec![e]))?;
    let bb = load_backbone::<f32>(&cfg.backbone.checkpoint)?;
    if bb.cfg != expected {
        return Err(ExperimentError::Config(vec![format!(
            "backbone checkpoint {} has config {:?}, experiment expects {:?}",
            cfg.backbone.checkpoint.display(),
            bb.cfg,
            expected
        )]));
    }
    if !bb.is_frozen() {
        return Err(ExperimentError::Config(vec!["backbone checkpoint is not frozen".into()]));
    }
    Ok(bb)
}

fn shards_for(cfg: &ExperimentConfig, train: &Dataset) -> Result<Vec<ClientShard>, ExperimentError> {
    Ok(partition(
        train,
        &PartitionSpec {
            scheme: cfg.partition,
            num_clients: cfg.federation.num_clients,
            seed: derive_seed(cfg.seed, "partition", &[]),
        },
    )?)
}

fn resolve_target(cfg: &ExperimentConfig) -> Result<Option<f64>, ExperimentError> {
    if let Some(t) = cfg.comms.target {
        return Ok(Some(t));
    }
    match &cfg.comms.target_run {
        Some(dir) => Ok(Some(report::read_summary(dir)?.best_mean)),
        None => Ok(None),
    }
}

/// Runs federated training and writes the run directory.
pub fn run_train(cfg: &ExperimentConfig, jobs: usize) -> Result<TrainSummary, ExperimentError> {
    cfg.validate()?;
    let bb = load_frozen_backbone(cfg)?;
    let depth = bb.cfg.depth;
    let data = load_datasets(cfg, &bb.cfg)?;
    let classes = data.train.num_classes();
    let shards = shards_for(cfg, &data.train)?;
    let fed = cfg.federation_config();
    let profiles = build_profiles(&fed, depth)?;
    let sgd = cfg.sgd_config();
    let init = init_trainable(&cfg.method, &bb, classes, derive_seed(cfg.seed, "adapter", &[]))?;
    let trainable_params = init.trainable_numel();
    debug_assert_eq!(trainable_params, count_trainable_params(&cfg.method, &bb.cfg, classes));
    let model = ExitModel::new(&bb, &cfg.method);

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(io_error(out))?;
    write_file(&out.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
    let metrics_path = out.join(METRICS_FILE);
    let file = std::fs::File::create(&metrics_path).map_err(io_error(&metrics_path))?;
    let mut writer = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let csv_err = |e: csv::Error| FederationError::Config(format!("writing metrics: {e}"));
    writer.write_record(metrics_header(depth)).map_err(csv_err)?;

    let mut rows: Vec<MetricsRow> = Vec::with_capacity(fed.rounds);
    let mut failed = 0usize;
    let mut last_accuracy: Option<ExitAccuracy> = None;
    let opts = RunOptions {
        jobs,
        direction: cfg.comms.direction,
    };
    let global = run_federation(
        &model,
        init,
        &data.train,
        &shards,
        &profiles,
        &fed,
        &sgd,
        &data.test,
        &opts,
        |report, _| {
            let row = MetricsRow::from_report(report, depth);
            writer.write_record(row.record()).map_err(csv_err)?;
            writer.flush().map_err(|e| FederationError::Config(format!("writing metrics: {e}")))?;
            failed += report.failed.len();
            if let Some(acc) = &report.accuracy {
                log::info!(
                    "round {}/{}: loss {:.4}, mean accuracy {:.4}",
                    report.round,
                    fed.rounds,
                    report.mean_loss,
                    acc.mean
                );
                last_accuracy = Some(acc.clone());
            }
            rows.push(row);
            Ok(())
        },
    )?;
    drop(writer);

    let meta = BTreeMap::from([
        ("kind".to_string(), "global".to_string()),
        ("round".to_string(), fed.rounds.to_string()),
        ("classes".to_string(), classes.to_string()),
        (
            "method".to_string(),
            serde_json::to_string(&cfg.method).expect("method serializes"),
        ),
    ]);
    persistence::save(out.join(GLOBAL_CHECKPOINT), &global, &meta)?;

    let target = match resolve_target(cfg)? {
        Some(t) => Some(t),
        None if cfg.method.kind == MethodKind::LwLinear => best_mean(&rows).map(|(m, _)| m),
        None => None,
    };
    let final_accuracy = match last_accuracy {
        Some(a) => a,
        None => ExitAccuracy {
            per_exit: vec![None; depth],
            mean: f64::NAN,
        },
    };
    let (best, best_round) = best_mean(&rows).unwrap_or((f64::NAN, 0));
    let summary = TrainSummary {
        method: cfg.method.clone(),
        setting: fed.setting,
        rounds: fed.rounds,
        trainable_params,
        direction: cfg.comms.direction,
        final_accuracy,
        best_mean: best,
        best_mean_round: best_round,
        total_comms: rows.last().map_or(0, |r| r.cum_params),
        comms_to_target: target.and_then(|t| comms_to_target(&rows, trainable_params, t)),
        failed_client_rounds: failed,
    };
    write_file(&out.join(SUMMARY_FILE), &to_json(&summary))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: PersonalizeMode,
    pub trainable_params: usize,
    pub before_mean: f64,
    pub before_std: f64,
    pub after_mean: f64,
    pub after_std: f64,
    pub gain_mean: f64,
    /// Share of clients whose holdout accuracy strictly improved.
    pub improved_fraction: f64,
    /// `after_mean±after_std (+gain)` in percent.
    pub formatted: String,
    pub clients: Vec<PersonalizeOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub run_dir: PathBuf,
    pub severity: u8,
    pub epochs: usize,
    pub modes: Vec<ModeSummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Personalizes clients `0..personalization.clients` of a multi-tier run,
/// each at its tier exit, and writes `personalization.json` and
/// `personalization.csv` into `run_dir`.
pub fn run_personalize(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    jobs: usize,
) -> Result<PersonalizationReport, ExperimentError> {
    cfg.validate()?;
    if cfg.federation.setting != Setting::MultiTier {
        return Err(ExperimentError::Config(vec![
            "personalization needs a multi_tier run".into(),
        ]));
    }
    if !run_dir.is_dir() {
        return Err(ExperimentError::Io {
            path: run_dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        });
    }
    let bb = load_frozen_backbone(cfg)?;
    let data = load_datasets(cfg, &bb.cfg)?;
    let shards = shards_for(cfg, &data.train)?;
    let profiles = build_profiles(&cfg.federation_config(), bb.cfg.depth)?;
    let global: ParamSet<f32> = persistence::load(run_dir.join(GLOBAL_CHECKPOINT))?.params;
    let model = ExitModel::new(&bb, &cfg.method);
    let opts = &cfg.personalization;
    let seed = derive_seed(cfg.seed, "personalize", &[]);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(vec![format!("thread pool: {e}")]))?;

    let mut modes = Vec::new();
    for &mode in &opts.modes {
        let outcomes: Vec<PersonalizeOutcome> = pool.install(|| {
            (0..opts.clients)
                .into_par_iter()
                .map(|c| -> Result<PersonalizeOutcome, FederationError> {
                    let labels: Vec<usize> = shards[c].indices.iter().map(|&i| data.train.labels()[i]).collect();
                    let (train, holdout) = personal_split(&data.personal_pool, &labels, opts, seed, c)?;
                    let exit = profiles[c].tier;
                    Ok(personalize(&model, &global, &train, &holdout, exit, mode, opts, seed, c)?.1)
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let before: Vec<f64> = outcomes.iter().map(|o| o.before).collect();
        let after: Vec<f64> = outcomes.iter().map(|o| o.after).collect();
        let (before_mean, before_std) = mean_std(&before);
        let (after_mean, after_std) = mean_std(&after);
        let gain_mean = after_mean - before_mean;
        let improved = outcomes.iter().filter(|o| o.after > o.before).count();
        modes.push(ModeSummary {
            mode,
            trainable_params: outcomes.first().map_or(0, |o| o.trainable_params),
            before_mean,
            before_std,
            after_mean,
            after_std,
            gain_mean,
            improved_fraction: improved as f64 / outcomes.len().max(1) as f64,
            formatted: format!(
                "{:.2}±{:.2} ({:+.2})",
                100.0 * after_mean,
                100.0 * after_std,
                100.0 * gain_mean
            ),
            clients: outcomes,
        });
    }
    let report = PersonalizationReport {
        run_dir: run_dir.to_path_buf(),
        severity: opts.severity,
        epochs: opts.epochs,
        modes,
    };
    write_file(&run_dir.join("personalization.json"), &to_json(&report))?;
    let mut csv_out = Vec::new();
    writeln!(csv_out, "mode,client,exit,before,after,gain,trainable_params,changed_params").expect("in-memory");
    for m in &report.modes {
        let mode = serde_json::to_value(m.mode).expect("mode serializes");
        for o in &m.clients {
            writeln!(
                csv_out,
                "{},{},{},{},{},{},{},{}",
                mode.as_str().unwrap_or_default(),
                o.client,
                o.exit,
                o.before,
                o.after,
                o.gain(),
                o.trainable_params,
                o.changed_params
            )
            .expect("in-memory");
        }
    }
    write_file(&run_dir.join("personalization.csv"), &csv_out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsRow {
    pub name: String,
    pub params: usize,
    pub breakdown: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsTable {
    pub backbone: BackboneConfig,
    pub classes: usize,
    pub backbone_params: usize,
    pub rows: Vec<ParamsRow>,
    /// Per-exit inference cost of the configured method.
    pub budgets: Vec<ExitBudget>,
}

/// Shape-only accounting: trainable parameters per method and per-exit budgets.
pub fn params_table(cfg: &ExperimentConfig) -> Result<ParamsTable, ExperimentError> {
    let bb = cfg.backbone.resolve().map_err(|e| ExperimentError::Config(vec![e]))?;
    bb.validate()?;
    cfg.method.validate()?;
    let classes = cfg.data.classes;
    let d = bb.embed_dim;
    let row = |name: &str, m: &AdapterMethod| ParamsRow {
        name: name.to_string(),
        params: count_trainable_params(m, &bb, classes),
        breakdown: param_breakdown(m, &bb, classes)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    };
    let acc = AdapterMethod {
        kind: MethodKind::Accumulator,
        with_pa: false,
        ..cfg.method.clone()
    };
    let r = cfg.method.pa_rank_for(d);
    let rows = vec![
        row("full_fine_tune", &AdapterMethod::of(MethodKind::FullFineTune)),
        row("lw_linear", &AdapterMethod::of(MethodKind::LwLinear)),
        row("lw_mlp", &AdapterMethod::of(MethodKind::LwMlp)),
        ParamsRow {
            name: "parallel_adapter".into(),
            params: bb.depth * pa_param_count(d, r),
            breakdown: vec![("rank".into(), r)],
        },
        row("accumulator", &acc),
        ParamsRow {
            name: "client_token".into(),
            params: d,
            breakdown: Vec::new(),
        },
    ];
    let budgets = (1..=bb.depth).map(|l| exit_budget(&cfg.method, &bb, classes, l)).collect();
    Ok(ParamsTable {
        backbone_params: count_backbone_params(&bb),
        backbone: bb,
        classes,
        rows,
        budgets,
    })
}

/// `1.23M`, `0.38K` or the plain integer below one hundred.
fn human(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.2}M", n as f64 / 1e6)
    } else if n >= 100 {
        format!("{:.2}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

pub fn render_params(t: &ParamsTable) -> String {
    let mut out = format!(
        "backbone: depth {} width {} heads {} patch {} side {} channels {}; {} parameters ({}), {} classes\n\n",
        t.backbone.depth,
        t.backbone.embed_dim,
        t.backbone.num_heads,
        t.backbone.patch_size,
        t.backbone.image_side,
        t.backbone.channels,
        t.backbone_params,
        human(t.backbone_params),
        t.classes
    );
    out.push_str("| method | trainable | approx |\n|---|---|---|\n");
    for r in &t.rows {
        out.push_str(&format!("| {} | {} | {} |\n", r.name, r.params, human(r.params)));
    }
    out.push_str("\n| exit | params read | MACs |\n|---|---|---|\n");
    for b in &t.budgets {
        out.push_str(&format!("| {} | {} | {} |\n", b.exit, b.params, b.macs));
    }
    out
}
