use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    comms_cost, evaluate_exits, fedavg, local_train, sample_clients, ClientProfile, Direction, ExitAccuracy,
    FederationConfig, FederationError,
};
use crate::adapters::ExitModel;
use crate::data::{ClientShard, Dataset};
use crate::numerics::{Element, ParamSet, SgdConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Sampled clients whose local run hit a non-finite value; excluded from the average.
    pub failed: Vec<usize>,
    /// Parameters moved this round over both links: `2 · k · |w_PE|`.
    pub transmitted_params: u64,
    /// Cumulative cost in the configured direction convention.
    pub cum_params: u64,
    pub mean_loss: f64,
    pub accuracy: Option<ExitAccuracy>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Maximum concurrent client simulations.
    pub jobs: usize,
    pub direction: Direction,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            direction: Direction::Single,
        }
    }
}

/// Runs `cfg.rounds` FedAvg rounds from `init` and returns the final global set.
///
/// Clients of a round train concurrently on up to `opts.jobs` threads; their
/// results are aggregated in client-id order, so the output is independent
/// of `jobs`. `on_round` sees every report together with the new global set.
#[allow(clippy::too_many_arguments)]
pub fn run_federation<T: Element>(
    model: &ExitModel<'_, T>,
    init: ParamSet<T>,
    train: &Dataset,
    shards: &[ClientShard],
    profiles: &[ClientProfile],
    cfg: &FederationConfig,
    sgd: &SgdConfig,
    test: &Dataset,
    opts: &RunOptions,
    mut on_round: impl FnMut(&RoundReport, &ParamSet<T>) -> Result<(), FederationError>,
) -> Result<ParamSet<T>, FederationError> {
    cfg.validate(model.depth())?;
    if shards.len() != cfg.num_clients || profiles.len() != cfg.num_clients {
        return Err(FederationError::Config(format!(
            "{} shards and {} profiles for {} clients",
            shards.len(),
            profiles.len(),
            cfg.num_clients
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| FederationError::Config(format!("thread pool: {e}")))?;
    let w_pe = init.trainable_numel();
    let exits = cfg.eval_exits(model.depth());
    let mut global = init;
    for r in 0..cfg.rounds {
        let sampled = sample_clients(cfg.num_clients, cfg.sample_fraction, r, cfg.seed);
        let results: Vec<_> = pool.install(|| {
            sampled
                .par_iter()
                .map(|&id| local_train(model, &global, train, &shards[id], &profiles[id], cfg, sgd, r))
                .collect()
        });
        let mut updates = Vec::with_capacity(results.len());
        let mut losses = Vec::with_capacity(results.len());
        let mut failed = Vec::new();
        for (&id, res) in sampled.iter().zip(results) {
            match res {
                Ok(out) => {
                    losses.push(out.mean_loss);
                    updates.push((out.params, out.weight));
                }
                Err(FederationError::Numeric(e)) => {
                    log::warn!("round {}: client {id} aborted: {e}", r + 1);
                    failed.push(id);
                }
                Err(e) => return Err(e),
            }
        }
        if updates.is_empty() {
            return Err(FederationError::NoUpdates { round: r + 1 });
        }
        global = fedavg(&updates)?;
        let round = r + 1;
        let accuracy = if round % cfg.eval_every == 0 || round == cfg.rounds {
            Some(pool.install(|| evaluate_exits(model, &global, test, &exits))?)
        } else {
            None
        };
        let report = RoundReport {
            round,
            transmitted_params: 2 * sampled.len() as u64 * w_pe as u64,
            sampled,
            failed,
            cum_params: comms_cost(round, w_pe, opts.direction),
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            accuracy,
        };
        on_round(&report, &global)?;
    }
    Ok(global)
}
