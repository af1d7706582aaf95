//! Metrics file, run summary, and cross-run comparison tables.
//!
//! `metrics.csv` columns, one row per round:
//!
//! | column         | meaning                                                  |
//! |----------------|----------------------------------------------------------|
//! | `round`        | 1-based round index                                      |
//! | `cum_params`   | cumulative transmitted parameters (`round × |w_PE|`, doubled for `both`) |
//! | `loss`         | mean local training loss over the round's clients        |
//! | `acc_exit_{l}` | test accuracy at exit `l`, empty when not evaluated      |
//! | `acc_mean`     | unweighted mean over evaluated exits, empty when not evaluated |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_error, ExperimentError, METRICS_FILE, SUMMARY_FILE};
use crate::adapters::{AdapterMethod, MethodKind};
use crate::federation::{format_rounds_by_millions, Direction, ExitAccuracy, RoundReport, Setting};

pub const METRICS_COLUMNS: [&str; 3] = ["round", "cum_params", "loss"];

pub fn metrics_header(depth: usize) -> Vec<String> {
    let mut h: Vec<String> = METRICS_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend((1..=depth).map(|l| format!("acc_exit_{l}")));
    h.push("acc_mean".into());
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub cum_params: u64,
    pub loss: f64,
    pub acc: Vec<Option<f64>>,
    pub acc_mean: Option<f64>,
}

impl MetricsRow {
    pub fn from_report(r: &RoundReport, depth: usize) -> Self {
        Self {
            round: r.round,
            cum_params: r.cum_params,
            loss: r.mean_loss,
            acc: r
                .accuracy
                .as_ref()
                .map(|a| a.per_exit.clone())
                .unwrap_or_else(|| vec![None; depth]),
            acc_mean: r.accuracy.as_ref().map(|a| a.mean),
        }
    }

    pub fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut rec = vec![self.round.to_string(), self.cum_params.to_string(), self.loss.to_string()];
        rec.extend(self.acc.iter().map(|a| opt(*a)));
        rec.push(opt(self.acc_mean));
        rec
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, ExperimentError> {
    let path = path.as_ref();
    let bad = |message: String| ExperimentError::Metrics {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let depth = header.len().checked_sub(4).filter(|d| *d >= 1).ok_or_else(|| bad("too few columns".into()))?;
    if header.iter().collect::<Vec<_>>() != metrics_header(depth) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64, ExperimentError> {
            rec[i].parse::<f64>().map_err(|e| bad(format!("column {i}: {e}")))
        };
        let opt = |i: usize| -> Result<Option<f64>, ExperimentError> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(MetricsRow {
            round: rec[0].parse().map_err(|e| bad(format!("round: {e}")))?,
            cum_params: rec[1].parse().map_err(|e| bad(format!("cum_params: {e}")))?,
            loss: num(2)?,
            acc: (3..3 + depth).map(opt).collect::<Result<_, _>>()?,
            acc_mean: opt(3 + depth)?,
        });
    }
    Ok(rows)
}

/// First evaluated round whose mean accuracy reaches `target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommsToTarget {
    pub target: f64,
    pub round: usize,
    pub cum_params: u64,
    /// `rounds×M` with `M = |w_PE|` in millions.
    pub formatted: String,
}

pub fn comms_to_target(rows: &[MetricsRow], trainable_params: usize, target: f64) -> Option<CommsToTarget> {
    rows.iter()
        .find(|r| r.acc_mean.is_some_and(|m| m >= target))
        .map(|r| CommsToTarget {
            target,
            round: r.round,
            cum_params: r.cum_params,
            formatted: format_rounds_by_millions(r.round, trainable_params),
        })
}

/// Best evaluated mean accuracy and the round it occurred (earliest on ties).
pub fn best_mean(rows: &[MetricsRow]) -> Option<(f64, usize)> {
    rows.iter()
        .filter_map(|r| r.acc_mean.map(|m| (m, r.round)))
        .fold(None, |best, (m, r)| match best {
            Some((b, _)) if b >= m => best,
            _ => Some((m, r)),
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: AdapterMethod,
    pub setting: Setting,
    pub rounds: usize,
    pub trainable_params: usize,
    pub direction: Direction,
    pub final_accuracy: ExitAccuracy,
    pub best_mean: f64,
    pub best_mean_round: usize,
    pub total_comms: u64,
    pub comms_to_target: Option<CommsToTarget>,
    /// Client-rounds dropped for non-finite values.
    pub failed_client_rounds: usize,
}

pub fn read_summary(run_dir: &Path) -> Result<TrainSummary, ExperimentError> {
    let path = run_dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_error(&path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Metrics {
        path,
        message: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: PathBuf,
    pub method: MethodKind,
    pub with_pa: bool,
    pub trainable_params: usize,
    pub final_accuracy: ExitAccuracy,
    pub best_mean: f64,
    pub comms_to_target: Option<CommsToTarget>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// `None` when no target was given and no layer-wise-linear run is present.
    pub target: Option<f64>,
    pub rows: Vec<ReportRow>,
}

/// Compares runs; the default target is the best mean accuracy among
/// layer-wise-linear runs without parallel adapters.
pub fn build_report(run_dirs: &[PathBuf], target: Option<f64>) -> Result<Report, ExperimentError> {
    let mut loaded = Vec::new();
    for dir in run_dirs {
        let summary = read_summary(dir)?;
        let rows = read_metrics(dir.join(METRICS_FILE))?;
        loaded.push((dir.clone(), summary, rows));
    }
    let target = target.or_else(|| {
        loaded
            .iter()
            .filter(|(_, s, _)| s.method.kind == MethodKind::LwLinear && !s.method.with_pa)
            .map(|(_, s, _)| s.best_mean)
            .reduce(f64::max)
    });
    let rows = loaded
        .into_iter()
        .map(|(run, s, rows)| ReportRow {
            run,
            method: s.method.kind,
            with_pa: s.method.with_pa,
            trainable_params: s.trainable_params,
            comms_to_target: target.and_then(|t| comms_to_target(&rows, s.trainable_params, t)),
            final_accuracy: s.final_accuracy,
            best_mean: s.best_mean,
        })
        .collect();
    Ok(Report { target, rows })
}

pub fn render_report(report: &Report) -> String {
    let mut out = String::new();
    match report.target {
        Some(t) => out.push_str(&format!("target mean accuracy: {t:.4}\n\n")),
        None => out.push_str("target mean accuracy: none\n\n"),
    }
    out.push_str("| run | method | |w_PE| | final mean | deepest | best mean | comms to target |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in &report.rows {
        let method = format!("{}{}", r.method.as_str(), if r.with_pa { "+pa" } else { "" });
        let comms = match (&r.comms_to_target, report.target) {
            (Some(c), _) => c.formatted.clone(),
            (None, Some(_)) => "not reached".into(),
            (None, None) => "-".into(),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} |\n",
            r.run.display(),
            method,
            r.trainable_params,
            r.final_accuracy.mean,
            r.final_accuracy.deepest().unwrap_or(f64::NAN),
            r.best_mean,
            comms
        ));
    }
    out
}
