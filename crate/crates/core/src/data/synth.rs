//! Synthetic image classification tasks.
//!
//! Every task draws its class templates from one fixed bank of smooth blob
//! patterns; `label_map_seed` picks which bank patterns (and weights) make up
//! each class. Two tasks with different label-map seeds therefore share
//! low-level structure but not labels.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::numerics::Tensor;
use crate::rng;

const BANK_SEED: u64 = 0x5EED_BA5E;
const BANK_SIZE: usize = 24;
const PATTERNS_PER_CLASS: usize = 3;
const BLOBS_PER_PATTERN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub n: usize,
    pub side: usize,
    pub channels: usize,
    pub cluster_std: f64,
    pub label_map_seed: u64,
    pub noise_seed: u64,
}

fn bank(side: usize, channels: usize) -> Vec<Vec<f32>> {
    let mut rng = rng::stream(BANK_SEED, "bank", &[side as u64, channels as u64]);
    let s = side as f64;
    (0..BANK_SIZE)
        .map(|_| {
            let blobs: Vec<(f64, f64, f64, usize)> = (0..BLOBS_PER_PATTERN)
                .map(|_| {
                    (
                        rng.random_range(0.0..s),
                        rng.random_range(0.0..s),
                        rng.random_range(0.08 * s..0.22 * s),
                        rng.random_range(0..channels),
                    )
                })
                .collect();
            let mut img = vec![0f32; channels * side * side];
            for c in 0..channels {
                for y in 0..side {
                    for x in 0..side {
                        let v: f64 = blobs
                            .iter()
                            .filter(|b| b.3 == c)
                            .map(|&(cy, cx, w, _)| {
                                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                                (-(dy * dy + dx * dx) / (2.0 * w * w)).exp()
                            })
                            .sum();
                        img[(c * side + y) * side + x] = v as f32;
                    }
                }
            }
            img
        })
        .collect()
}

/// One template per class; distinct classes use distinct pattern subsets.
pub fn class_templates(classes: usize, side: usize, channels: usize, label_map_seed: u64) -> Vec<Vec<f32>> {
    let bank = bank(side, channels);
    let mut rng = rng::stream(label_map_seed, "label-map", &[classes as u64]);
    let mut used: Vec<Vec<usize>> = Vec::new();
    while used.len() < classes {
        let mut combo = index::sample(&mut rng, BANK_SIZE, PATTERNS_PER_CLASS).into_vec();
        combo.sort_unstable();
        if !used.contains(&combo) {
            used.push(combo);
        }
    }
    used.iter()
        .map(|combo| {
            let mut t = vec![0.1f32; channels * side * side];
            for &j in combo {
                let w: f32 = rng.random_range(0.5..0.9);
                for (v, &b) in t.iter_mut().zip(&bank[j]) {
                    *v += w * b;
                }
            }
            t.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            t
        })
        .collect()
}

/// Balanced dataset: example `i` (before shuffling) has label `i mod classes`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset, DataError> {
    if spec.classes < 2 || spec.n < spec.classes {
        return Err(DataError::Invalid(format!(
            "need classes >= 2 and n >= classes, got classes={} n={}",
            spec.classes, spec.n
        )));
    }
    if spec.side == 0 || spec.channels == 0 || !(spec.cluster_std >= 0.0) {
        return Err(DataError::Invalid("side, channels must be positive and cluster_std >= 0".into()));
    }
    let templates = class_templates(spec.classes, spec.side, spec.channels, spec.label_map_seed);
    let mut rng = rng::stream(spec.noise_seed, "synth-noise", &[]);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.cluster_std).expect("non-negative std");
    let per = spec.channels * spec.side * spec.side;
    let mut data = Vec::with_capacity(spec.n * per);
    for &y in &labels {
        for &t in &templates[y] {
            let v = if spec.cluster_std > 0.0 {
                t + noise.sample(&mut rng) as f32
            } else {
                t
            };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let inputs = Tensor::new(vec![spec.n, spec.channels, spec.side, spec.side], data)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(inputs, labels, spec.classes)
}
