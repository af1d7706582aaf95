use serde::{Deserialize, Serialize};

use crate::adapters::{head_param_count, pa_param_count, AdapterMethod, HeadKind, MethodKind};
use crate::backbone::{block_param_count, BackboneConfig};

/// Inference cost of one example at a given exit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitBudget {
    pub exit: usize,
    /// Parameters read by the forward pass.
    pub params: usize,
    /// Multiply-accumulates in matrix products (norms and activations excluded).
    pub macs: u64,
}

fn block_macs(n: u64, d: u64, hidden: u64) -> u64 {
    let qkv = 3 * n * d * d;
    let attn = 2 * n * n * d;
    let proj = n * d * d;
    let mlp = 2 * n * d * hidden;
    qkv + attn + proj + mlp
}

fn head_macs(kind: HeadKind, d: u64, hidden: u64, classes: u64) -> u64 {
    match kind {
        HeadKind::Linear => d * classes,
        HeadKind::Mlp => d * hidden + hidden * classes,
    }
}

/// Cost of running the backbone through `exit` and predicting there.
pub fn exit_budget(method: &AdapterMethod, cfg: &BackboneConfig, classes: usize, exit: usize) -> ExitBudget {
    let (d, hidden) = (cfg.embed_dim, cfg.mlp_hidden());
    let n = cfg.seq_len() as u64;
    let (du, hu, cu) = (d as u64, hidden as u64, classes as u64);
    let block = block_param_count(d, hidden);

    let mut params = cfg.patch_dim() * d + d + cfg.seq_len() * d + d + exit * block;
    let mut macs = cfg.num_patches() as u64 * cfg.patch_dim() as u64 * du + exit as u64 * block_macs(n, du, hu);
    if method.with_pa {
        let r = method.pa_rank_for(d);
        params += exit * pa_param_count(d, r);
        macs += exit as u64 * 2 * n * du * r as u64;
    }
    match method.kind {
        MethodKind::Accumulator => {
            params += d + (exit + 1) * d + method.depth * block;
            params += head_param_count(method.head_kind, d, hidden, classes);
            let first = if method.replace {
                if method.replace_at_tokenizer {
                    0
                } else {
                    1
                }
            } else {
                exit
            };
            for j in first..=exit {
                macs += method.depth as u64 * block_macs(j as u64 + 2, du, hu);
            }
            macs += head_macs(method.head_kind, du, hu, cu);
        }
        MethodKind::LwLinear | MethodKind::LwMlp | MethodKind::FullFineTune => {
            let kind = method.lw_head_kind().expect("layer-wise method");
            params += 2 * d + head_param_count(kind, d, hidden, classes);
            macs += head_macs(kind, du, hu, cu);
        }
    }
    ExitBudget { exit, params, macs }
}
