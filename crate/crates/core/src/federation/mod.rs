//! Federated training of adapter parameters over simulated clients.

mod aggregate;
mod budget;
mod comms;
mod eval;
mod local;
mod personalize;
mod sampling;
mod server;

pub use aggregate::fedavg;
pub use budget::{exit_budget, ExitBudget};
pub use comms::{comms_cost, format_rounds_by_millions, Direction};
pub use eval::{evaluate_exits, ExitAccuracy};
pub use local::{local_train, LocalOutcome};
pub use personalize::{personal_split, personalize, PersonalizeMode, PersonalizeOptions, PersonalizeOutcome};
pub use sampling::{assign_tiers, build_profiles, sample_clients, sample_count};
pub use server::{run_federation, RoundReport, RunOptions};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterError;
use crate::data::DataError;
use crate::numerics::NumericError;

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("parameter schema mismatch at `{0}`")]
    Schema(String),
    #[error("no client update survived round {round}")]
    NoUpdates { round: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Every client trains and is evaluated at the final exit only.
    Conventional,
    /// Every client draws a fresh exit in `1..=L` per batch.
    Anytime,
    /// Each client is pinned to a balanced tier exit.
    MultiTier,
}

/// How a client picks the exit trained on each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitPolicy {
    Fixed(usize),
    /// Uniform over `1..=max`.
    UniformRandom(usize),
}

impl ExitPolicy {
    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        match *self {
            ExitPolicy::Fixed(l) => l,
            ExitPolicy::UniformRandom(max) => rng.random_range(1..=max),
        }
    }

    pub fn max_exit(&self) -> usize {
        match *self {
            ExitPolicy::Fixed(l) | ExitPolicy::UniformRandom(l) => l,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    /// Deepest exit this client can run.
    pub tier: usize,
    pub policy: ExitPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub sample_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub setting: Setting,
    /// Evaluate every this many rounds (and after the last one).
    pub eval_every: usize,
    /// Set from the experiment seed, not from the config table.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 40,
            sample_fraction: 0.1,
            rounds: 300,
            local_epochs: 1,
            batch_size: 10,
            setting: Setting::MultiTier,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl FederationConfig {
    /// Every violated constraint, in a stable order.
    pub fn problems(&self, depth: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_clients == 0 {
            out.push("federation.num_clients must be >= 1".to_string());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            out.push(format!("federation.sample_fraction {} outside (0, 1]", self.sample_fraction));
        }
        if self.batch_size == 0 {
            out.push("federation.batch_size must be >= 1".to_string());
        }
        if self.eval_every == 0 {
            out.push("federation.eval_every must be >= 1".to_string());
        }
        if self.setting == Setting::MultiTier && self.num_clients < depth {
            out.push(format!(
                "multi_tier needs num_clients ({}) >= backbone depth ({depth})",
                self.num_clients
            ));
        }
        out
    }

    pub fn validate(&self, depth: usize) -> Result<(), FederationError> {
        match self.problems(depth).into_iter().next() {
            Some(p) => Err(FederationError::Config(p)),
            None => Ok(()),
        }
    }

    /// Exits reported by evaluation: only the last one in the conventional setting.
    pub fn eval_exits(&self, depth: usize) -> Vec<usize> {
        match self.setting {
            Setting::Conventional => vec![depth],
            Setting::Anytime | Setting::MultiTier => (1..=depth).collect(),
        }
    }
}
