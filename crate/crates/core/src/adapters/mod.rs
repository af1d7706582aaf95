//! Trainable adaptation methods on top of the frozen backbone.
//!
//! Every method resolves to a [`ParamSet`] of trainable parameters (`w_PE`)
//! that is overlaid on the backbone parameters at forward time. Names:
//!
//! | prefix              | owner                                        |
//! |---------------------|----------------------------------------------|
//! | `acc.client_token`  | Accumulator client token `[d]`               |
//! | `acc.layer_pos`     | Accumulator layer positions `[(L+1), d]`     |
//! | `acc.blocks.{k}.*`  | Accumulator attention blocks, `k = 0..depth` |
//! | `head.*`            | shared exit head (Accumulator)               |
//! | `lw.{l}.*`          | layer-wise exit heads, `l = 1..=L`           |
//! | `pa.{l}.*`          | parallel adapters, `l = 1..=L`               |
//! | `backbone.*`        | trainable backbone copy (full fine-tuning)   |

mod accumulator;
mod model;

pub use accumulator::{accumulate, predict_at_exit, replacement_token};
pub use model::ExitModel;

use serde::{Deserialize, Serialize};

use crate::backbone::{block_param_count, count_backbone_params, init_block, Backbone, BackboneConfig};
use crate::numerics::{Element, ParamSet, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    FullFineTune,
    LwLinear,
    LwMlp,
    Accumulator,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [
        MethodKind::FullFineTune,
        MethodKind::LwLinear,
        MethodKind::LwMlp,
        MethodKind::Accumulator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::FullFineTune => "full_fine_tune",
            MethodKind::LwLinear => "lw_linear",
            MethodKind::LwMlp => "lw_mlp",
            MethodKind::Accumulator => "accumulator",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    Linear,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdapterError {
    #[error("invalid adapter config: {0}")]
    Config(String),
}

/// Adaptation method plus its ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterMethod {
    pub kind: MethodKind,
    pub with_pa: bool,
    /// Install the Accumulator output as the next block's CLS token.
    pub replace: bool,
    /// Add the emitted CLS token to the Accumulator output before the head.
    pub residual: bool,
    /// Number of Accumulator attention blocks.
    pub depth: usize,
    pub head_kind: HeadKind,
    /// Also replace the tokenizer CLS token (layer 0) before block 1.
    pub replace_at_tokenizer: bool,
    /// Parallel-adapter bottleneck; `None` means `max(4, round(d / 6))`.
    pub pa_rank: Option<usize>,
    pub pa_scale: f64,
    /// Dropout on the hidden layer of layer-wise MLP heads, training only.
    pub dropout: f64,
}

impl Default for AdapterMethod {
    fn default() -> Self {
        Self {
            kind: MethodKind::Accumulator,
            with_pa: false,
            replace: true,
            residual: true,
            depth: 1,
            head_kind: HeadKind::Mlp,
            replace_at_tokenizer: true,
            pa_rank: None,
            pa_scale: 4.0,
            dropout: 0.1,
        }
    }
}

impl AdapterMethod {
    pub fn of(kind: MethodKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.kind == MethodKind::Accumulator && self.depth == 0 {
            return Err(AdapterError::Config("accumulator depth must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AdapterError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.pa_rank == Some(0) {
            return Err(AdapterError::Config("pa_rank must be >= 1".into()));
        }
        if !self.pa_scale.is_finite() {
            return Err(AdapterError::Config("pa_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn pa_rank_for(&self, d: usize) -> usize {
        self.pa_rank
            .unwrap_or_else(|| ((d as f64 / 6.0).round() as usize).max(4))
    }

    /// Layer-wise heads are MLPs for `LwMlp` and full fine-tuning.
    pub fn lw_head_kind(&self) -> Option<HeadKind> {
        match self.kind {
            MethodKind::LwLinear => Some(HeadKind::Linear),
            MethodKind::LwMlp | MethodKind::FullFineTune => Some(HeadKind::Mlp),
            MethodKind::Accumulator => None,
        }
    }

    pub fn trains_backbone(&self) -> bool {
        self.kind == MethodKind::FullFineTune
    }
}

pub fn head_param_count(kind: HeadKind, d: usize, hidden: usize, classes: usize) -> usize {
    match kind {
        HeadKind::Linear => d * classes + classes,
        HeadKind::Mlp => d * hidden + hidden + hidden * classes + classes,
    }
}

pub fn pa_param_count(d: usize, r: usize) -> usize {
    d * r + r + r * d + d
}

/// Named parameter subtotals of a method's trainable set, in a stable order.
pub fn param_breakdown(method: &AdapterMethod, cfg: &BackboneConfig, classes: usize) -> Vec<(&'static str, usize)> {
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let mut parts = Vec::new();
    match method.kind {
        MethodKind::Accumulator => {
            parts.push(("client_token", d));
            parts.push(("layer_pos", (cfg.depth + 1) * d));
            parts.push(("blocks", method.depth * block_param_count(d, hidden)));
            parts.push(("head", head_param_count(method.head_kind, d, hidden, classes)));
        }
        MethodKind::LwLinear | MethodKind::LwMlp | MethodKind::FullFineTune => {
            if method.trains_backbone() {
                parts.push(("backbone", count_backbone_params(cfg)));
            }
            let kind = method.lw_head_kind().expect("layer-wise method");
            parts.push(("lw_heads", cfg.depth * head_param_count(kind, d, hidden, classes)));
        }
    }
    if method.with_pa {
        parts.push(("parallel_adapters", cfg.depth * pa_param_count(d, method.pa_rank_for(d))));
    }
    parts
}

/// Size of `w_PE` for `method` on backbone `cfg` with `classes` outputs.
pub fn count_trainable_params(method: &AdapterMethod, cfg: &BackboneConfig, classes: usize) -> usize {
    param_breakdown(method, cfg, classes).iter().map(|(_, n)| n).sum()
}

fn init_head<T: Element>(
    params: &mut ParamSet<T>,
    prefix: &str,
    kind: HeadKind,
    d: usize,
    hidden: usize,
    classes: usize,
    rng: &mut rng::StreamRng,
) {
    match kind {
        HeadKind::Linear => {
            params.insert(format!("{prefix}.fc.weight"), rng::trunc_normal(&[d, classes], 0.02, rng), true);
            params.insert(format!("{prefix}.fc.bias"), Tensor::zeros(&[classes]), true);
        }
        HeadKind::Mlp => {
            params.insert(format!("{prefix}.fc1.weight"), rng::trunc_normal(&[d, hidden], 0.02, rng), true);
            params.insert(format!("{prefix}.fc1.bias"), Tensor::zeros(&[hidden]), true);
            params.insert(format!("{prefix}.fc2.weight"), rng::trunc_normal(&[hidden, classes], 0.02, rng), true);
            params.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(&[classes]), true);
        }
    }
}

/// Freshly initialized trainable parameters for `method`.
pub fn init_trainable<T: Element>(
    method: &AdapterMethod,
    backbone: &Backbone<T>,
    classes: usize,
    seed: u64,
) -> Result<ParamSet<T>, AdapterError> {
    method.validate()?;
    if classes < 2 {
        return Err(AdapterError::Config("need at least 2 classes".into()));
    }
    let cfg = &backbone.cfg;
    let (d, hidden) = (cfg.embed_dim, cfg.mlp_hidden());
    let mut rng = rng::stream(seed, "adapter-init", &[]);
    let mut params = ParamSet::new();
    match method.kind {
        MethodKind::Accumulator => {
            params.insert("acc.client_token", rng::normal(&[d], 0.02, &mut rng), true);
            params.insert("acc.layer_pos", rng::normal(&[cfg.depth + 1, d], 0.02, &mut rng), true);
            for k in 0..method.depth {
                init_block(&mut params, &format!("acc.blocks.{k}"), d, hidden, true, &mut rng);
            }
            init_head(&mut params, "head", method.head_kind, d, hidden, classes, &mut rng);
        }
        MethodKind::LwLinear | MethodKind::LwMlp | MethodKind::FullFineTune => {
            if method.trains_backbone() {
                let mut copy = backbone.params.clone();
                copy.set_trainable(true);
                params.extend(copy);
            }
            let kind = method.lw_head_kind().expect("layer-wise method");
            for l in 1..=cfg.depth {
                init_head(&mut params, &format!("lw.{l}"), kind, d, hidden, classes, &mut rng);
            }
        }
    }
    if method.with_pa {
        let r = method.pa_rank_for(d);
        for l in 1..=cfg.depth {
            params.insert(format!("pa.{l}.down.weight"), rng::trunc_normal(&[d, r], 0.02, &mut rng), true);
            params.insert(format!("pa.{l}.down.bias"), Tensor::zeros(&[r]), true);
            params.insert(format!("pa.{l}.up.weight"), Tensor::zeros(&[r, d]), true);
            params.insert(format!("pa.{l}.up.bias"), Tensor::zeros(&[d]), true);
        }
    }
    Ok(params)
}
