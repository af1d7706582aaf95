//! Experiment configuration: one TOML document, every key overridable by a
//! `--dotted.key=value` flag.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::adapters::AdapterMethod;
use crate::backbone::{BackboneConfig, PretrainOptions};
use crate::data::PartitionScheme;
use crate::federation::{Direction, FederationConfig, PersonalizeOptions};
use crate::numerics::SgdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Run directory for `train` (metrics, summary, global checkpoint).
    pub output_dir: PathBuf,
    pub backbone: BackboneSection,
    pub pretrain: PretrainSection,
    pub data: DataSection,
    pub partition: PartitionScheme,
    pub method: AdapterMethod,
    pub federation: FederationConfig,
    pub sgd: SgdSection,
    pub personalization: PersonalizeOptions,
    pub comms: CommsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/train"),
            backbone: BackboneSection::default(),
            pretrain: PretrainSection::default(),
            data: DataSection::default(),
            partition: PartitionScheme::Lda { alpha: 0.1 },
            method: AdapterMethod::default(),
            federation: FederationConfig::default(),
            sgd: SgdSection::default(),
            personalization: PersonalizeOptions::default(),
            comms: CommsSection::default(),
        }
    }
}

/// A named preset, optionally with individual fields replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    /// `toy` or `deit-small`.
    pub preset: String,
    pub depth: Option<usize>,
    pub embed_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub patch_size: Option<usize>,
    pub image_side: Option<usize>,
    pub channels: Option<usize>,
    pub pretrain_classes: Option<usize>,
    /// Written by `pretrain`, read by `train`.
    pub checkpoint: PathBuf,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            depth: None,
            embed_dim: None,
            num_heads: None,
            mlp_ratio: None,
            patch_size: None,
            image_side: None,
            channels: None,
            pretrain_classes: None,
            checkpoint: PathBuf::from("runs/backbone.ckpt"),
        }
    }
}

impl BackboneSection {
    pub fn resolve(&self) -> Result<BackboneConfig, String> {
        let mut cfg =
            BackboneConfig::preset(&self.preset).ok_or_else(|| format!("unknown backbone preset `{}`", self.preset))?;
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.depth, self.depth);
        set(&mut cfg.embed_dim, self.embed_dim);
        set(&mut cfg.num_heads, self.num_heads);
        set(&mut cfg.mlp_ratio, self.mlp_ratio);
        set(&mut cfg.patch_size, self.patch_size);
        set(&mut cfg.image_side, self.image_side);
        set(&mut cfg.channels, self.channels);
        set(&mut cfg.pretrain_classes, self.pretrain_classes);
        Ok(cfg)
    }
}

/// Synthetic pretraining task; class count, side and channels come from the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub n: usize,
    pub cluster_std: f64,
    pub label_map_seed: u64,
    pub noise_seed: u64,
    pub options: PretrainOptions,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            n: 4096,
            cluster_std: 0.3,
            label_map_seed: 1,
            noise_seed: 2,
            options: PretrainOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

/// Downstream task. Synthetic test and personal pools reuse the label map
/// with noise seeds derived from `noise_seed`; IDX runs use the test files as
/// the personal pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_personal: usize,
    pub cluster_std: f64,
    pub label_map_seed: u64,
    pub noise_seed: u64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 8,
            n_train: 4000,
            n_test: 1000,
            n_personal: 4000,
            cluster_std: 0.3,
            label_map_seed: 11,
            noise_seed: 12,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

/// `total_steps` defaults to the number of federated rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdSection {
    pub base_lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub total_steps: Option<usize>,
}

impl Default for SgdSection {
    fn default() -> Self {
        Self {
            base_lr: 5e-3,
            min_lr: 0.0,
            momentum: 0.0,
            total_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommsSection {
    pub direction: Direction,
    /// Mean-over-exits accuracy for the comms-to-target summary.
    pub target: Option<f64>,
    /// A layer-wise-linear run directory whose best mean accuracy is the target.
    pub target_run: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.sgd.base_lr,
            total_steps: self.sgd.total_steps.unwrap_or(self.federation.rounds).max(1),
            min_lr: self.sgd.min_lr,
            momentum: self.sgd.momentum,
        }
    }

    /// Federation settings with the experiment seed applied.
    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            seed: self.seed,
            ..self.federation.clone()
        }
    }

    /// Every constraint violation, so a run fails before any compute.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let bb = match self.backbone.resolve() {
            Ok(bb) => {
                if let Err(e) = bb.validate() {
                    out.push(e.to_string());
                }
                Some(bb)
            }
            Err(e) => {
                out.push(e);
                None
            }
        };
        if let Err(e) = self.method.validate() {
            out.push(e.to_string());
        }
        if let Some(bb) = &bb {
            out.extend(self.federation.problems(bb.depth));
        }
        if let Err(e) = self.sgd_config().validate() {
            out.push(format!("sgd: {e}"));
        }
        if let PartitionScheme::Lda { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                out.push(format!("partition.alpha {alpha} must be positive"));
            }
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.classes < 2 {
                    out.push("data.classes must be >= 2".into());
                }
                if d.n_train < self.federation.num_clients.max(d.classes) {
                    out.push(format!(
                        "data.n_train {} must cover every class and client",
                        d.n_train
                    ));
                }
                if d.n_test < d.classes || d.n_personal < d.classes {
                    out.push("data.n_test and data.n_personal must be >= data.classes".into());
                }
                if !(d.cluster_std >= 0.0) {
                    out.push("data.cluster_std must be >= 0".into());
                }
            }
            DataSource::Idx => {
                for (key, v) in [
                    ("train_images", &d.train_images),
                    ("train_labels", &d.train_labels),
                    ("test_images", &d.test_images),
                    ("test_labels", &d.test_labels),
                ] {
                    if v.is_none() {
                        out.push(format!("data.{key} is required for source = \"idx\""));
                    }
                }
            }
        }
        let p = &self.personalization;
        if p.severity > 5 {
            out.push(format!("personalization.severity {} outside [0, 5]", p.severity));
        }
        if p.batch_size == 0 || p.examples_per_client < 2 {
            out.push("personalization needs batch_size >= 1 and examples_per_client >= 2".into());
        }
        if p.clients > self.federation.num_clients {
            out.push(format!(
                "personalization.clients {} exceeds federation.num_clients {}",
                p.clients, self.federation.num_clients
            ));
        }
        if let Some(t) = self.comms.target {
            if !(0.0..=1.0).contains(&t) {
                out.push(format!("comms.target {t} outside [0, 1]"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ExperimentError::Config(problems))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses a TOML document, then applies `overrides` (`dotted.key`, `value`).
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ExperimentError::Config(vec![e.to_string()]))?;
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_value(raw)).map_err(|e| ExperimentError::Config(vec![e]))?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(vec![e.to_string()]))
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ExperimentError::Io {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }
}

/// Interprets `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("bad override key `{key}`"));
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
