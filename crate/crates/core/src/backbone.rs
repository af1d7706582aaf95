//! The frozen transformer foundation model.
//!
//! A patch tokenizer, learned positional table and CLS token feed `depth`
//! pre-norm blocks:
//!
//! ```text
//! z0 = Tokenizer(x) + p
//! z  = MSA(LN(z)) + z
//! z  = MLP(LN(z)) + z
//! ```
//!
//! [`Backbone::forward_with_taps`] exposes the CLS token after the tokenizer
//! and after every block, and lets the caller overwrite it before the next block.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::numerics::{
    lit, lr_at, Element, NumericError, ParamSet, ParamSource, ParamStack, Sgd, SgdConfig, Tape, Tensor, Var,
};
use crate::rng::{self, StreamRng};

pub const PREFIX: &str = "backbone";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub channels: usize,
    pub pretrain_classes: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("pretraining data: {0}")]
    Data(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

impl BackboneConfig {
    /// Desk-scale default: 4 blocks of width 32 over 16×16 single-channel images.
    pub fn toy() -> Self {
        Self {
            depth: 4,
            embed_dim: 32,
            num_heads: 4,
            mlp_ratio: 4,
            patch_size: 4,
            image_side: 16,
            channels: 1,
            pretrain_classes: 8,
        }
    }

    /// DeiT-small geometry (224×224 RGB, 16×16 patches), for parameter accounting.
    pub fn deit_small() -> Self {
        Self {
            depth: 12,
            embed_dim: 384,
            num_heads: 6,
            mlp_ratio: 4,
            patch_size: 16,
            image_side: 224,
            channels: 3,
            pretrain_classes: 1000,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "deit-small" => Some(Self::deit_small()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::Config(m));
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_side {} must be a positive multiple of patch_size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.pretrain_classes < 2 {
            return bad("channels and mlp_ratio must be >= 1, pretrain_classes >= 2".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_side / self.patch_size).pow(2)
    }

    /// Patches plus the CLS token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }
}

/// Parameters in one pre-norm block of width `d` with hidden width `hidden`.
pub fn block_param_count(d: usize, hidden: usize) -> usize {
    let norms = 2 * 2 * d;
    let attn = (d * 3 * d + 3 * d) + (d * d + d);
    let mlp = (d * hidden + hidden) + (hidden * d + d);
    norms + attn + mlp
}

/// Backbone parameters: tokenizer, positional table, CLS token, blocks and final norm.
pub fn count_backbone_params(cfg: &BackboneConfig) -> usize {
    let d = cfg.embed_dim;
    let tokenizer = cfg.patch_dim() * d + d;
    let pos = cfg.seq_len() * d;
    tokenizer + pos + d + cfg.depth * block_param_count(d, cfg.mlp_hidden()) + 2 * d
}

/// Adds the parameters of one transformer block under `prefix`.
pub(crate) fn init_block<T: Element>(
    params: &mut ParamSet<T>,
    prefix: &str,
    d: usize,
    hidden: usize,
    trainable: bool,
    rng: &mut StreamRng,
) {
    let mut put = |name: &str, t: Tensor<T>| params.insert(format!("{prefix}.{name}"), t, trainable);
    put("norm1.gamma", Tensor::full(&[d], T::one()));
    put("norm1.beta", Tensor::zeros(&[d]));
    put("attn.qkv.weight", rng::trunc_normal(&[d, 3 * d], 0.02, rng));
    put("attn.qkv.bias", Tensor::zeros(&[3 * d]));
    put("attn.proj.weight", rng::trunc_normal(&[d, d], 0.02, rng));
    put("attn.proj.bias", Tensor::zeros(&[d]));
    put("norm2.gamma", Tensor::full(&[d], T::one()));
    put("norm2.beta", Tensor::zeros(&[d]));
    put("mlp.fc1.weight", rng::trunc_normal(&[d, hidden], 0.02, rng));
    put("mlp.fc1.bias", Tensor::zeros(&[hidden]));
    put("mlp.fc2.weight", rng::trunc_normal(&[hidden, d], 0.02, rng));
    put("mlp.fc2.bias", Tensor::zeros(&[d]));
}

pub(crate) fn linear<'t, T: Element>(
    tape: &'t Tape<T>,
    params: &(impl ParamSource<T> + ?Sized),
    prefix: &str,
    x: &Var<'t, T>,
) -> Result<Var<'t, T>, NumericError> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    x.matmul(&w)?.add(&b)
}

pub(crate) fn layer_norm<'t, T: Element>(
    tape: &'t Tape<T>,
    params: &(impl ParamSource<T> + ?Sized),
    prefix: &str,
    x: &Var<'t, T>,
) -> Result<Var<'t, T>, NumericError> {
    let g = tape.param(params, &format!("{prefix}.gamma"))?;
    let b = tape.param(params, &format!("{prefix}.beta"))?;
    x.layer_norm(&g, &b)
}

/// Extra branch added to a block's MLP output, given the block index and the
/// normalized MLP input (parallel adapters).
pub type MlpSideBranch<'a, 't, T> = dyn Fn(usize, &Var<'t, T>) -> Result<Var<'t, T>, NumericError> + 'a;

/// One pre-norm block: `z += MSA(LN(z))`, then `z += MLP(LN(z)) [+ side(LN(z))]`.
pub(crate) fn block_forward<'t, T: Element>(
    tape: &'t Tape<T>,
    params: &(impl ParamSource<T> + ?Sized),
    prefix: &str,
    heads: usize,
    x: &Var<'t, T>,
    side: Option<(usize, &MlpSideBranch<'_, 't, T>)>,
) -> Result<Var<'t, T>, NumericError> {
    let h = layer_norm(tape, params, &format!("{prefix}.norm1"), x)?;
    let qkv = linear(tape, params, &format!("{prefix}.attn.qkv"), &h)?;
    let a = linear(tape, params, &format!("{prefix}.attn.proj"), &qkv.attention(heads)?)?;
    let x = x.add(&a)?;
    let h = layer_norm(tape, params, &format!("{prefix}.norm2"), &x)?;
    let hidden = linear(tape, params, &format!("{prefix}.mlp.fc1"), &h)?.gelu()?;
    let mut m = linear(tape, params, &format!("{prefix}.mlp.fc2"), &hidden)?;
    if let Some((layer, branch)) = side {
        m = m.add(&branch(layer, &h)?)?;
    }
    x.add(&m)
}

/// Rearranges `[B, C, H, W]` images into `[B, N, C·p·p]` patch rows
/// (patches row-major; inside a patch: channel, then row, then column).
pub fn patchify<T: Element>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>, NumericError> {
    let &[b, c, h, w] = images.shape() else {
        return Err(NumericError::Rank {
            op: "patchify",
            expected: 4,
            shape: images.shape().to_vec(),
        });
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(NumericError::ShapeMismatch {
            op: "patchify",
            lhs: images.shape().to_vec(),
            rhs: vec![patch, patch],
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(b * gh * gw * pd);
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for dy in 0..patch {
                        let row = ((bi * c + ci) * h + py * patch + dy) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

/// CLS tokens `[B, d]` recorded at indices `0..=l`, as emitted (before any replacement).
#[derive(Clone, Debug)]
pub struct ClsTrace<'t, T: Element> {
    tokens: Vec<Var<'t, T>>,
}

impl<'t, T: Element> ClsTrace<'t, T> {
    pub fn tokens(&self) -> &[Var<'t, T>] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of the most recent entry.
    pub fn layer(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn last(&self) -> &Var<'t, T> {
        self.tokens.last().expect("trace holds the tokenizer CLS")
    }

    pub fn truncated(&self, layer: usize) -> Self {
        Self {
            tokens: self.tokens[..=layer].to_vec(),
        }
    }
}

/// Called after the tokenizer (layer 0) and after every block before the last
/// executed one. Returning a `[B, d]` token replaces the stream's CLS slot.
pub type ClsTap<'a, 't, T> =
    dyn FnMut(usize, &ClsTrace<'t, T>) -> Result<Option<Var<'t, T>>, NumericError> + 'a;

#[derive(Clone, Debug)]
pub struct Backbone<T: Element> {
    pub cfg: BackboneConfig,
    pub params: ParamSet<T>,
}

impl<T: Element> Backbone<T> {
    /// Random initialization; all parameters start trainable.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "backbone-init", &[]);
        let d = cfg.embed_dim;
        let mut params = ParamSet::new();
        params.insert(
            format!("{PREFIX}.patch_embed.weight"),
            rng::trunc_normal(&[cfg.patch_dim(), d], 0.02, &mut rng),
            true,
        );
        params.insert(format!("{PREFIX}.patch_embed.bias"), Tensor::zeros(&[d]), true);
        params.insert(
            format!("{PREFIX}.pos_embed"),
            rng::trunc_normal(&[cfg.seq_len(), d], 0.02, &mut rng),
            true,
        );
        params.insert(
            format!("{PREFIX}.cls_token"),
            rng::trunc_normal(&[d], 0.02, &mut rng),
            true,
        );
        for i in 1..=cfg.depth {
            init_block(
                &mut params,
                &block_prefix(i),
                d,
                cfg.mlp_hidden(),
                true,
                &mut rng,
            );
        }
        params.insert(format!("{PREFIX}.norm.gamma"), Tensor::full(&[d], T::one()), true);
        params.insert(format!("{PREFIX}.norm.beta"), Tensor::zeros(&[d]), true);
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    /// Runs the tokenizer and blocks `1..=upto_layer`, resolving parameter names
    /// through `params` (normally `self.params`, possibly overlaid).
    #[allow(clippy::type_complexity)]
    pub fn forward_with_taps<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &(impl ParamSource<T> + ?Sized),
        images: &Tensor<T>,
        upto_layer: usize,
        side: Option<&MlpSideBranch<'_, 't, T>>,
        tap: &mut ClsTap<'_, 't, T>,
    ) -> Result<(Var<'t, T>, ClsTrace<'t, T>), NumericError> {
        if upto_layer == 0 || upto_layer > self.cfg.depth {
            return Err(NumericError::Index {
                op: "forward_with_taps",
                index: upto_layer,
                len: self.cfg.depth + 1,
            });
        }
        let b = images.shape()[0];
        let d = self.cfg.embed_dim;
        let patches = tape.constant(patchify(images, self.cfg.patch_size)?);
        let tokens = linear(tape, params, &format!("{PREFIX}.patch_embed"), &patches)?;
        let cls = tape
            .param(params, &format!("{PREFIX}.cls_token"))?
            .expand(b)?
            .reshape(&[b, 1, d])?;
        let pos = tape.param(params, &format!("{PREFIX}.pos_embed"))?;
        let mut z = cls.concat_seq(&tokens)?.add(&pos)?;

        let mut trace = ClsTrace {
            tokens: vec![z.select_token(0)?],
        };
        for layer in 0..=upto_layer {
            if layer > 0 {
                z = block_forward(
                    tape,
                    params,
                    &block_prefix(layer),
                    self.cfg.num_heads,
                    &z,
                    side.map(|s| (layer, s)),
                )?;
                trace.tokens.push(z.select_token(0)?);
            }
            if layer < upto_layer {
                if let Some(replacement) = tap(layer, &trace)? {
                    z = z.replace_token(0, &replacement)?;
                }
            }
        }
        Ok((z, trace))
    }

    /// Plain forward (no taps).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        images: &Tensor<T>,
        upto_layer: usize,
    ) -> Result<(Var<'t, T>, ClsTrace<'t, T>), NumericError> {
        self.forward_with_taps(tape, &self.params, images, upto_layer, None, &mut |_, _| Ok(None))
    }

    /// The backbone's final LayerNorm applied to a `[B, d]` token.
    pub fn final_norm<'t>(
        &self,
        tape: &'t Tape<T>,
        params: &(impl ParamSource<T> + ?Sized),
        x: &Var<'t, T>,
    ) -> Result<Var<'t, T>, NumericError> {
        layer_norm(tape, params, &format!("{PREFIX}.norm"), x)
    }
}

pub fn block_prefix(layer: usize) -> String {
    format!("{PREFIX}.blocks.{layer}")
}

/// Central pretraining recipe for the stand-in foundation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub holdout_fraction: f64,
    pub accuracy_floor: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            holdout_fraction: 0.1,
            accuracy_floor: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub holdout_accuracy: f64,
    pub below_floor: bool,
}

const HEAD: &str = "pretrain_head";
const MICRO_BATCH: usize = 8;

fn pretrain_logits<'t, T: Element>(
    bb: &Backbone<T>,
    tape: &'t Tape<T>,
    params: &ParamStack<'_, T>,
    images: &Tensor<T>,
) -> Result<Var<'t, T>, NumericError> {
    let (_, trace) = bb.forward_with_taps(tape, params, images, bb.cfg.depth, None, &mut |_, _| Ok(None))?;
    let feat = bb.final_norm(tape, params, trace.last())?;
    linear(tape, params, HEAD, &feat)
}

/// Trains the backbone centrally with a temporary linear head on the CLS token,
/// discards the head and returns the frozen model.
pub fn pretrain_backbone<T: Element>(
    cfg: &BackboneConfig,
    data: &Dataset,
    epochs: usize,
    seed: u64,
    opts: &PretrainOptions,
) -> Result<(Backbone<T>, PretrainReport), BackboneError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(BackboneError::Data("empty pretraining dataset".into()));
    }
    if data.num_classes() != cfg.pretrain_classes {
        return Err(BackboneError::Data(format!(
            "dataset has {} classes, config expects {}",
            data.num_classes(),
            cfg.pretrain_classes
        )));
    }
    if data.side() != cfg.image_side || data.channels() != cfg.channels {
        return Err(BackboneError::Data(format!(
            "dataset images are {}x{}x{}, config expects {}x{}x{}",
            data.channels(),
            data.side(),
            data.side(),
            cfg.channels,
            cfg.image_side,
            cfg.image_side
        )));
    }
    let mut bb = Backbone::<T>::init(cfg, seed)?;
    let (holdout, train) = data.split(opts.holdout_fraction, rng::derive_seed(seed, "pretrain-split", &[]));
    let mut head = ParamSet::new();
    let mut rng = rng::stream(seed, "pretrain-head", &[]);
    head.insert(
        format!("{HEAD}.weight"),
        rng::trunc_normal(&[cfg.embed_dim, cfg.pretrain_classes], 0.02, &mut rng),
        true,
    );
    head.insert(format!("{HEAD}.bias"), Tensor::zeros(&[cfg.pretrain_classes]), true);

    let bs = opts.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(bs);
    let sched = SgdConfig {
        base_lr: opts.lr,
        total_steps: (epochs * steps_per_epoch).max(1),
        min_lr: 0.0,
        momentum: opts.momentum,
    };
    let mut opt_bb = Sgd::new(opts.momentum);
    let mut opt_head = Sgd::new(opts.momentum);
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, "pretrain-epoch", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(bs) {
            // Fixed micro-batches, reduced in order, so results do not depend on thread count.
            let parts: Vec<_> = batch
                .par_chunks(MICRO_BATCH)
                .map(|micro| -> Result<_, NumericError> {
                    let stack = ParamStack::new(vec![&head, &bb.params]);
                    let tape = Tape::new();
                    let (images, labels) = train.batch::<T>(micro);
                    let loss = pretrain_logits(&bb, &tape, &stack, &images)?.cross_entropy(&labels)?;
                    let w = lit::<T>(micro.len() as f64 / batch.len() as f64);
                    let loss_val = loss.value().item();
                    let grads = tape.gradients(&loss.scale(w)?)?;
                    let named: Vec<(String, Tensor<T>)> =
                        grads.by_name().map(|(n, g)| (n.to_string(), g.clone())).collect();
                    Ok((loss_val * w, named))
                })
                .collect::<Result<_, _>>()?;
            let mut batch_loss = T::zero();
            for (l, named) in parts {
                batch_loss += l;
                for (name, g) in named {
                    let target = if name.starts_with(HEAD) { &mut head } else { &mut bb.params };
                    if let Some(p) = target.get_mut(&name) {
                        p.grad.add_assign(&g);
                    }
                }
            }
            let lr = lr_at(step, &sched);
            opt_bb.step(&mut bb.params, lr)?;
            opt_head.step(&mut head, lr)?;
            step += 1;
            epoch_loss += batch_loss.to_f64().unwrap();
        }
        last_loss = epoch_loss / steps_per_epoch as f64;
        log::info!("pretrain epoch {epoch}: loss {last_loss:.4}");
    }

    let holdout_accuracy = if holdout.is_empty() {
        f64::NAN
    } else {
        let stack = ParamStack::new(vec![&head, &bb.params]);
        let idx: Vec<usize> = (0..holdout.len()).collect();
        let correct: usize = idx
            .chunks(128)
            .map(|chunk| -> Result<usize, NumericError> {
                let tape = Tape::new();
                let (images, labels) = holdout.batch::<T>(chunk);
                let logits = pretrain_logits(&bb, &tape, &stack, &images)?;
                Ok(logits
                    .value()
                    .argmax_rows()
                    .iter()
                    .zip(&labels)
                    .filter(|(p, y)| p == y)
                    .count())
            })
            .sum::<Result<usize, _>>()?;
        correct as f64 / holdout.len() as f64
    };
    let below_floor = epochs > 0 && !(holdout_accuracy >= opts.accuracy_floor);
    if below_floor {
        log::warn!(
            "pretraining reached holdout accuracy {holdout_accuracy:.3}, below the floor {:.3}",
            opts.accuracy_floor
        );
    }
    bb.freeze();
    Ok((
        bb,
        PretrainReport {
            epochs,
            steps: step,
            final_loss: last_loss,
            holdout_accuracy,
            below_floor,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, cfg: &BackboneConfig, seed: u64) -> Tensor<f64> {
        let mut rng = rng::stream(seed, "img", &[]);
        rng::normal(&[b, cfg.channels, cfg.image_side, cfg.image_side], 1.0, &mut rng)
    }

    fn frozen_toy() -> Backbone<f64> {
        let mut bb = Backbone::init(&BackboneConfig::toy(), 3).unwrap();
        bb.freeze();
        bb
    }

    #[test]
    fn deit_small_count() {
        let n = count_backbone_params(&BackboneConfig::deit_small());
        assert_eq!(n, 21_665_664);
    }

    #[test]
    fn count_matches_allocation() {
        let cfg = BackboneConfig::toy();
        let bb = Backbone::<f32>::init(&cfg, 0).unwrap();
        assert_eq!(bb.params.numel(), count_backbone_params(&cfg));
    }

    #[test]
    fn block_subtotal_linear_in_depth() {
        let mut cfg = BackboneConfig::toy();
        let base = count_backbone_params(&cfg);
        cfg.depth *= 2;
        let doubled = count_backbone_params(&cfg);
        assert_eq!(doubled - base, 4 * block_param_count(32, 128));
    }

    #[test]
    fn zero_depth_rejected() {
        let mut cfg = BackboneConfig::toy();
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
        cfg.depth = 2;
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn token_sequence_length() {
        let bb = frozen_toy();
        let tape = Tape::new();
        let (z, trace) = bb.forward(&tape, &images(2, &bb.cfg, 0), 4).unwrap();
        assert_eq!(z.shape(), &[2, 17, 32]);
        assert_eq!(trace.len(), 5);
    }

    #[test]
    fn empty_tap_matches_plain_forward() {
        let bb = frozen_toy();
        let x = images(3, &bb.cfg, 1);
        let t1 = Tape::new();
        let (a, _) = bb.forward(&t1, &x, 4).unwrap();
        let t2 = Tape::new();
        let (b, _) = bb
            .forward_with_taps(&t2, &bb.params, &x, 4, None, &mut |_, _| Ok(None))
            .unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn replacement_touches_only_cls_slot() {
        let bb = frozen_toy();
        let x = images(2, &bb.cfg, 2);
        let tape = Tape::new();
        let (plain1, _) = bb.forward(&tape, &x, 1).unwrap();
        let (plain2, _) = bb.forward(&tape, &x, 2).unwrap();
        let mut seen_z1: Option<Tensor<f64>> = None;
        let (replaced2, trace) = bb
            .forward_with_taps(&tape, &bb.params, &x, 2, None, &mut |layer, tr| {
                if layer == 1 {
                    seen_z1 = Some(tr.last().value().clone());
                    return Ok(Some(tape.constant(Tensor::zeros(&[2, 32]))));
                }
                Ok(None)
            })
            .unwrap();
        assert_ne!(plain2.value(), replaced2.value());
        // The trace keeps the emitted (pre-replacement) token.
        let emitted = plain1.select_token(0).unwrap();
        assert_eq!(seen_z1.as_ref().unwrap(), emitted.value());
        assert_eq!(trace.tokens()[1].value(), emitted.value());
    }

    #[test]
    fn forwards_are_bitwise_repeatable() {
        let bb = frozen_toy();
        let x = images(2, &bb.cfg, 5);
        let t = Tape::new();
        let (_, a) = bb.forward(&t, &x, 4).unwrap();
        let (_, b) = bb.forward(&t, &x, 4).unwrap();
        for (u, v) in a.tokens().iter().zip(b.tokens()) {
            assert_eq!(u.value(), v.value());
        }
    }

    #[test]
    fn wrong_replacement_shape_errors() {
        let bb = frozen_toy();
        let x = images(2, &bb.cfg, 2);
        let tape = Tape::new();
        let res = bb.forward_with_taps(&tape, &bb.params, &x, 2, None, &mut |_, _| {
            Ok(Some(tape.constant(Tensor::zeros(&[2, 31]))))
        });
        assert!(matches!(res, Err(NumericError::ShapeMismatch { .. })));
    }

    #[test]
    fn patchify_layout() {
        // One 1-channel 4x4 image, patch 2 → 4 patches of 4 pixels.
        let img = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn zero_epochs_gives_frozen_random_init() {
        let spec = crate::data::SynthSpec {
            classes: 8,
            n: 64,
            side: 16,
            channels: 1,
            cluster_std: 0.1,
            label_map_seed: 0,
            noise_seed: 0,
        };
        let ds = crate::data::synth_dataset(&spec).unwrap();
        let (bb, report) = pretrain_backbone::<f32>(&BackboneConfig::toy(), &ds, 0, 4, &Default::default()).unwrap();
        assert!(bb.is_frozen());
        assert!(!report.below_floor);
        let fresh = Backbone::<f32>::init(&BackboneConfig::toy(), 4).unwrap();
        let mut fresh_frozen = fresh.params.clone();
        fresh_frozen.set_trainable(false);
        assert!(bb.params.bitwise_eq(&fresh_frozen));
    }
}
