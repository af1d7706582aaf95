//! Client partitioning: IID shuffle-split and per-class Dirichlet (LDA).

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase", deny_unknown_fields)]
pub enum PartitionScheme {
    Lda { alpha: f64 },
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub seed: u64,
}

/// Indices of one client's examples, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientShard {
    pub client: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // Every gamma draw underflowed: fall back to one random client.
        let mut q = vec![0.0; k];
        q[rng.random_range(0..k)] = 1.0;
        q
    }
}

pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>, DataError> {
    let (n, k) = (ds.len(), spec.num_clients);
    if k == 0 || k > n {
        return Err(DataError::TooManyClients {
            clients: k,
            examples: n,
        });
    }
    let mut rng = rng::stream(spec.seed, "partition", &[]);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
    match spec.scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let (base, extra) = (n / k, n % k);
            let mut at = 0;
            for (c, bucket) in buckets.iter_mut().enumerate() {
                let size = base + usize::from(c < extra);
                bucket.extend_from_slice(&idx[at..at + size]);
                at += size;
            }
        }
        PartitionScheme::Lda { alpha } => {
            if !(alpha > 0.0) {
                return Err(DataError::Invalid(format!("LDA alpha must be > 0, got {alpha}")));
            }
            for class in 0..ds.num_classes() {
                let members: Vec<usize> = (0..n).filter(|&i| ds.labels()[i] == class).collect();
                if members.is_empty() {
                    continue;
                }
                let q = dirichlet(alpha, k, &mut rng);
                let pick = WeightedIndex::new(&q).expect("proportions sum to one");
                for i in members {
                    buckets[pick.sample(&mut rng)].push(i);
                }
            }
            // Repair empty clients by taking one example from the largest shard.
            while let Some(empty) = buckets.iter().position(Vec::is_empty) {
                let largest = (0..k)
                    .max_by_key(|&c| (buckets[c].len(), std::cmp::Reverse(c)))
                    .unwrap();
                let moved = buckets[largest].pop().unwrap();
                buckets[empty].push(moved);
            }
        }
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(client, mut indices)| {
            indices.sort_unstable();
            ClientShard { client, indices }
        })
        .collect())
}

/// Mean over clients of the largest single-class share of the client's data.
pub fn heterogeneity(shards: &[ClientShard], labels: &[usize], classes: usize) -> f64 {
    let total: f64 = shards
        .iter()
        .map(|s| {
            let mut counts = vec![0usize; classes];
            for &i in &s.indices {
                counts[labels[i]] += 1;
            }
            *counts.iter().max().unwrap() as f64 / s.len() as f64
        })
        .sum();
    total / shards.len() as f64
}
