use rand::seq::SliceRandom;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{evaluate_exits, FederationError};
use crate::adapters::{ExitModel, MethodKind};
use crate::data::{corrupt, CorruptionSpec, Dataset};
use crate::numerics::{Element, ParamSet, Sgd, Tape};
use crate::rng;

/// Which parameters a client fine-tunes locally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonalizeMode {
    /// Every federated trainable parameter.
    FullAdapter,
    /// Only the Accumulator client token.
    ClientTokenOnly,
    /// Only the parallel adapters.
    PaOnly,
    /// Federated parameters plus the whole backbone.
    FullModel,
}

impl PersonalizeMode {
    pub const ALL: [PersonalizeMode; 4] = [
        PersonalizeMode::FullAdapter,
        PersonalizeMode::ClientTokenOnly,
        PersonalizeMode::PaOnly,
        PersonalizeMode::FullModel,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizeOptions {
    /// Modes run by the personalization command, each from the same federated model.
    pub modes: Vec<PersonalizeMode>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant learning rate for local fine-tuning.
    pub lr: f64,
    /// Learning rate for [`PersonalizeMode::ClientTokenOnly`], which moves a single d-vector.
    pub client_token_lr: f64,
    pub momentum: f64,
    pub severity: u8,
    /// Personal examples per client before the 50/50 train/holdout split.
    pub examples_per_client: usize,
    /// Personalize clients `0..clients`.
    pub clients: usize,
}

impl Default for PersonalizeOptions {
    fn default() -> Self {
        Self {
            modes: vec![PersonalizeMode::ClientTokenOnly, PersonalizeMode::FullAdapter],
            epochs: 10,
            batch_size: 10,
            lr: 0.02,
            client_token_lr: 0.5,
            momentum: 0.0,
            severity: 3,
            examples_per_client: 200,
            clients: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizeOutcome {
    pub client: usize,
    pub mode: PersonalizeMode,
    pub exit: usize,
    pub before: f64,
    pub after: f64,
    /// Scalars marked trainable during personalization.
    pub trainable_params: usize,
    /// Scalars whose value differs from the federated model afterwards.
    pub changed_params: usize,
}

impl PersonalizeOutcome {
    pub fn gain(&self) -> f64 {
        self.after - self.before
    }
}

/// Personal data for one client: examples drawn from `pool` with the label
/// mix of `shard_labels`, corrupted with a client-specific noise seed, then
/// split in half into (train, holdout).
pub fn personal_split(
    pool: &Dataset,
    shard_labels: &[usize],
    opts: &PersonalizeOptions,
    seed: u64,
    client: usize,
) -> Result<(Dataset, Dataset), FederationError> {
    let classes = pool.num_classes();
    let mut weights = vec![0.0f64; classes];
    for &y in shard_labels {
        weights[y] += 1.0;
    }
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| FederationError::Config(format!("client {client} label mix: {e}")))?;
    let mut r = rng::stream(seed, "personal-data", &[client as u64]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in pool.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    for list in &mut by_class {
        list.shuffle(&mut r);
    }
    let mut cursor = vec![0usize; classes];
    let mut picked = Vec::with_capacity(opts.examples_per_client);
    for _ in 0..opts.examples_per_client {
        let c = dist.sample(&mut r);
        if by_class[c].is_empty() {
            continue;
        }
        picked.push(by_class[c][cursor[c] % by_class[c].len()]);
        cursor[c] += 1;
    }
    if picked.len() < 2 {
        return Err(FederationError::Config(format!("client {client}: personal pool too small")));
    }
    let spec = CorruptionSpec {
        severity: opts.severity,
        seed: rng::derive_seed(seed, "personal-noise", &[client as u64]),
    };
    let noisy = corrupt(&pool.subset(&picked), &spec)?;
    let (train, holdout) = noisy.split(0.5, rng::derive_seed(seed, "personal-split", &[client as u64]));
    Ok((train, holdout))
}

fn count_changed<T: Element>(after: &ParamSet<T>, global: &ParamSet<T>, backbone: &ParamSet<T>) -> usize {
    after
        .iter()
        .map(|p| {
            let reference = global.get(&p.name).or_else(|| backbone.get(&p.name)).expect("known name");
            p.value()
                .data()
                .iter()
                .zip(reference.value().data())
                .filter(|(a, b)| a != b)
                .count()
        })
        .sum()
}

/// Fine-tunes the mode's parameter subset on `train` at a fixed `exit` and
/// reports holdout accuracy before and after.
#[allow(clippy::too_many_arguments)]
pub fn personalize<T: Element>(
    model: &ExitModel<'_, T>,
    global: &ParamSet<T>,
    train: &Dataset,
    holdout: &Dataset,
    exit: usize,
    mode: PersonalizeMode,
    opts: &PersonalizeOptions,
    seed: u64,
    client: usize,
) -> Result<(ParamSet<T>, PersonalizeOutcome), FederationError> {
    let method = model.method;
    match mode {
        PersonalizeMode::ClientTokenOnly if method.kind != MethodKind::Accumulator => {
            return Err(FederationError::Config(
                "client_token_only personalization needs the accumulator method".into(),
            ));
        }
        PersonalizeMode::PaOnly if !method.with_pa => {
            return Err(FederationError::Config("pa_only personalization needs with_pa".into()));
        }
        _ => {}
    }
    if train.is_empty() || opts.batch_size == 0 {
        return Err(FederationError::Config(format!("client {client}: nothing to personalize on")));
    }
    let mut params = global.clone();
    if mode == PersonalizeMode::FullModel && !method.trains_backbone() {
        let mut copy = model.backbone.params.clone();
        copy.set_trainable(true);
        params.extend(copy);
    }
    match mode {
        PersonalizeMode::FullAdapter | PersonalizeMode::FullModel => params.set_trainable(true),
        PersonalizeMode::ClientTokenOnly => params.set_trainable_where(|n| n == "acc.client_token"),
        PersonalizeMode::PaOnly => params.set_trainable_where(|n| n.starts_with("pa.")),
    }
    let exits = [exit];
    let before = evaluate_exits(model, &params, holdout, &exits)?.mean;
    let mut r = rng::stream(seed, "personalize", &[client as u64]);
    let mut opt = Sgd::new(opts.momentum);
    let lr = match mode {
        PersonalizeMode::ClientTokenOnly => opts.client_token_lr,
        _ => opts.lr,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(opts.batch_size) {
            let (images, labels) = train.batch::<T>(chunk);
            let tape = Tape::new();
            let logits = model
                .forward_exits(&tape, &params, &images, &exits, Some(&mut r))?
                .pop()
                .expect("one exit requested");
            let loss = logits.cross_entropy(&labels)?;
            tape.backward(&loss, &mut params)?;
            opt.step(&mut params, lr)?;
        }
    }
    let after = evaluate_exits(model, &params, holdout, &exits)?.mean;
    let outcome = PersonalizeOutcome {
        client,
        mode,
        exit,
        before,
        after,
        trainable_params: params.trainable_numel(),
        changed_params: count_changed(&params, global, &model.backbone.params),
    };
    Ok((params, outcome))
}
