use rand::Rng;

use super::{accumulate, predict_at_exit, replacement_token, AdapterMethod, HeadKind, MethodKind};
use crate::backbone::{linear, Backbone, ClsTrace, MlpSideBranch};
use crate::numerics::{lit, Element, NumericError, ParamSet, ParamStack, Tape, Tensor, Var};
use crate::rng::StreamRng;

/// A backbone plus one adaptation method: maps images to logits at any exit.
#[derive(Clone, Copy)]
pub struct ExitModel<'a, T: Element> {
    pub backbone: &'a Backbone<T>,
    pub method: &'a AdapterMethod,
}

impl<'a, T: Element> ExitModel<'a, T> {
    pub fn new(backbone: &'a Backbone<T>, method: &'a AdapterMethod) -> Self {
        Self { backbone, method }
    }

    pub fn depth(&self) -> usize {
        self.backbone.cfg.depth
    }

    /// Logits `[B, C]` at each of `exits` (layer indices in `1..=L`) from a
    /// single backbone pass through the deepest requested exit.
    ///
    /// `trainable` overlays the backbone parameters. `dropout_rng` switches on
    /// training-mode dropout in layer-wise MLP heads.
    pub fn forward_exits<'t>(
        &self,
        tape: &'t Tape<T>,
        trainable: &ParamSet<T>,
        images: &Tensor<T>,
        exits: &[usize],
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Vec<Var<'t, T>>, NumericError> {
        let depth = self.depth();
        let Some(&upto) = exits.iter().max() else {
            return Ok(Vec::new());
        };
        if let Some(&bad) = exits.iter().find(|&&l| l == 0 || l > depth) {
            return Err(NumericError::Index {
                op: "forward_exits",
                index: bad,
                len: depth + 1,
            });
        }
        let stack = ParamStack::new(vec![trainable, &self.backbone.params]);
        let m = self.method;
        let heads = self.backbone.cfg.num_heads;
        let is_acc = m.kind == MethodKind::Accumulator;
        let mut wanted = vec![false; upto + 1];
        for &l in exits {
            wanted[l] = true;
        }
        let (trace, history) = self.backbone_pass(tape, &stack, images, upto, &wanted)?;

        let mut out = Vec::with_capacity(exits.len());
        for &l in exits {
            let z = &trace.tokens()[l];
            let logits = if is_acc {
                let h = match &history[l] {
                    Some(h) => h.clone(),
                    None => accumulate(tape, &stack, m, heads, &trace.truncated(l))?,
                };
                predict_at_exit(tape, &stack, m, z, &h)?
            } else {
                let feat = self.backbone.final_norm(tape, &stack, z)?;
                let prefix = format!("lw.{l}");
                match m.lw_head_kind().expect("layer-wise method") {
                    HeadKind::Linear => linear(tape, &stack, &format!("{prefix}.fc"), &feat)?,
                    HeadKind::Mlp => {
                        let mut hidden = linear(tape, &stack, &format!("{prefix}.fc1"), &feat)?.gelu()?;
                        if let Some(rng) = dropout_rng.as_deref_mut() {
                            if m.dropout > 0.0 {
                                let keep = 1.0 / (1.0 - m.dropout);
                                let mask = Tensor::from_fn(hidden.shape(), |_| {
                                    if rng.random::<f64>() < m.dropout {
                                        T::zero()
                                    } else {
                                        lit(keep)
                                    }
                                });
                                hidden = hidden.mul(&tape.constant(mask))?;
                            }
                        }
                        linear(tape, &stack, &format!("{prefix}.fc2"), &hidden)?
                    }
                }
            };
            out.push(logits);
        }
        Ok(out)
    }

    /// CLS history of the adapted backbone through layer `upto`, as seen by
    /// the adapter (tokens before any replacement at their own layer).
    pub fn cls_trace<'t>(
        &self,
        tape: &'t Tape<T>,
        trainable: &ParamSet<T>,
        images: &Tensor<T>,
        upto: usize,
    ) -> Result<ClsTrace<'t, T>, NumericError> {
        let stack = ParamStack::new(vec![trainable, &self.backbone.params]);
        Ok(self.backbone_pass(tape, &stack, images, upto, &vec![false; upto + 1])?.0)
    }

    /// One backbone pass with the method's side branches and CLS replacement;
    /// also returns the accumulator output `h^l` for each `wanted[l]`.
    #[allow(clippy::type_complexity)]
    fn backbone_pass<'t>(
        &self,
        tape: &'t Tape<T>,
        stack: &ParamStack<'_, T>,
        images: &Tensor<T>,
        upto: usize,
        wanted: &[bool],
    ) -> Result<(ClsTrace<'t, T>, Vec<Option<Var<'t, T>>>), NumericError> {
        let m = self.method;
        let heads = self.backbone.cfg.num_heads;

        let pa_scale = lit::<T>(m.pa_scale);
        let pa_branch = |layer: usize, h: &Var<'t, T>| -> Result<Var<'t, T>, NumericError> {
            let down = linear(tape, stack, &format!("pa.{layer}.down"), h)?.gelu()?;
            linear(tape, stack, &format!("pa.{layer}.up"), &down)?.scale(pa_scale)
        };
        let side: Option<&MlpSideBranch<'_, 't, T>> = if m.with_pa { Some(&pa_branch) } else { None };

        let is_acc = m.kind == MethodKind::Accumulator;
        let mut history: Vec<Option<Var<'t, T>>> = vec![None; upto + 1];
        let mut tap = |layer: usize, trace: &ClsTrace<'t, T>| {
            if !is_acc {
                return Ok(None);
            }
            let install = m.replace && (layer > 0 || m.replace_at_tokenizer);
            if !install && !wanted[layer] {
                return Ok(None);
            }
            let h = accumulate(tape, stack, m, heads, trace)?;
            let token = if install { Some(replacement_token(&h)?) } else { None };
            if wanted[layer] {
                history[layer] = Some(h);
            }
            Ok(token)
        };
        let (_, trace) = self
            .backbone
            .forward_with_taps(tape, stack, images, upto, side, &mut tap)?;
        Ok((trace, history))
    }

    pub fn logits_at<'t>(
        &self,
        tape: &'t Tape<T>,
        trainable: &ParamSet<T>,
        images: &Tensor<T>,
        exit: usize,
    ) -> Result<Var<'t, T>, NumericError> {
        Ok(self
            .forward_exits(tape, trainable, images, &[exit], None)?
            .pop()
            .expect("one exit requested"))
    }

    /// Argmax predictions per requested exit (evaluation mode, nothing recorded).
    pub fn predict(
        &self,
        trainable: &ParamSet<T>,
        images: &Tensor<T>,
        exits: &[usize],
    ) -> Result<Vec<Vec<usize>>, NumericError> {
        let tape = Tape::inference();
        Ok(self
            .forward_exits(&tape, trainable, images, exits, None)?
            .iter()
            .map(|v| v.value().argmax_rows())
            .collect())
    }
}
