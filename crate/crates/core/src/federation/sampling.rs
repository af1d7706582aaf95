use rand::seq::{index, SliceRandom};

use super::{ClientProfile, ExitPolicy, FederationConfig, FederationError, Setting};
use crate::rng;

/// `ceil(K * fraction)`, tolerant of representation error in `fraction`.
pub fn sample_count(num_clients: usize, fraction: f64) -> usize {
    let k = (num_clients as f64 * fraction - 1e-9).ceil() as usize;
    k.clamp(1, num_clients)
}

/// Sorted distinct client ids for `round`.
pub fn sample_clients(num_clients: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let k = sample_count(num_clients, fraction);
    let mut r = rng::stream(seed, "sample-clients", &[round as u64]);
    let mut ids = index::sample(&mut r, num_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Balanced tiers `1..=depth` (counts differ by at most one), randomly permuted.
pub fn assign_tiers(num_clients: usize, depth: usize, seed: u64) -> Result<Vec<usize>, FederationError> {
    if depth == 0 || num_clients < depth {
        return Err(FederationError::Config(format!(
            "cannot balance {num_clients} clients over {depth} tiers"
        )));
    }
    let mut tiers: Vec<usize> = (0..num_clients).map(|i| i % depth + 1).collect();
    tiers.shuffle(&mut rng::stream(seed, "tiers", &[]));
    Ok(tiers)
}

pub fn build_profiles(cfg: &FederationConfig, depth: usize) -> Result<Vec<ClientProfile>, FederationError> {
    cfg.validate(depth)?;
    let profile = |id, tier, policy| ClientProfile { id, tier, policy };
    Ok(match cfg.setting {
        Setting::Conventional => (0..cfg.num_clients)
            .map(|i| profile(i, depth, ExitPolicy::Fixed(depth)))
            .collect(),
        Setting::Anytime => (0..cfg.num_clients)
            .map(|i| profile(i, depth, ExitPolicy::UniformRandom(depth)))
            .collect(),
        Setting::MultiTier => assign_tiers(cfg.num_clients, depth, cfg.seed)?
            .into_iter()
            .enumerate()
            .map(|(i, t)| profile(i, t, ExitPolicy::Fixed(t)))
            .collect(),
    })
}
