use rand::seq::SliceRandom;

use super::{ClientProfile, FederationConfig, FederationError};
use crate::adapters::ExitModel;
use crate::data::{ClientShard, Dataset};
use crate::numerics::{lr_at, Element, NumericError, ParamSet, Sgd, SgdConfig, Tape};
use crate::rng;

#[derive(Clone, Debug)]
pub struct LocalOutcome<T: Element> {
    pub client: usize,
    pub params: ParamSet<T>,
    /// `N_i`, the shard size.
    pub weight: usize,
    pub mean_loss: f64,
    /// Batches trained at each exit; index 0 unused.
    pub exit_counts: Vec<usize>,
}

/// One client's local epochs starting from the `global` trainable set.
///
/// The random stream (shuffle, exit draws, dropout) is keyed by
/// `(seed, round, client)`, so the outcome does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn local_train<T: Element>(
    model: &ExitModel<'_, T>,
    global: &ParamSet<T>,
    data: &Dataset,
    shard: &ClientShard,
    profile: &ClientProfile,
    cfg: &FederationConfig,
    sgd: &SgdConfig,
    round: usize,
) -> Result<LocalOutcome<T>, FederationError> {
    if shard.is_empty() {
        return Err(FederationError::Config(format!("client {} has an empty shard", shard.client)));
    }
    if profile.policy.max_exit() > model.depth() {
        return Err(FederationError::Config(format!(
            "client {} exit {} exceeds backbone depth {}",
            profile.id,
            profile.policy.max_exit(),
            model.depth()
        )));
    }
    let mut r = rng::stream(cfg.seed, "local", &[round as u64, profile.id as u64]);
    let mut params = global.clone();
    let mut opt = Sgd::new(sgd.momentum);
    let lr = lr_at(round, sgd);
    let mut exit_counts = vec![0; model.depth() + 1];
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    let mut order = shard.indices.clone();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let exit = profile.policy.draw(&mut r);
            exit_counts[exit] += 1;
            let (images, labels) = data.batch::<T>(chunk);
            let tape = Tape::new();
            let logits = model
                .forward_exits(&tape, &params, &images, &[exit], Some(&mut r))?
                .pop()
                .expect("one exit requested");
            let loss = logits.cross_entropy(&labels)?;
            let value = loss.value().item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(NumericError::NonFinite { op: "local loss" }.into());
            }
            tape.backward(&loss, &mut params)?;
            opt.step(&mut params, lr)?;
            loss_sum += value;
            batches += 1;
        }
    }
    Ok(LocalOutcome {
        client: profile.id,
        params,
        weight: shard.len(),
        mean_loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
        exit_counts,
    })
}
