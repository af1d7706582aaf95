//! Datasets, non-IID client partitioning, and input corruption.

mod corrupt;
mod idx;
mod partition;
mod synth;

pub use corrupt::{corrupt, CorruptionSpec};
pub use idx::{load_idx, parse_idx};
pub use partition::{heterogeneity, partition, ClientShard, PartitionScheme, PartitionSpec};
pub use synth::{synth_dataset, SynthSpec};

use rand::seq::SliceRandom;

use crate::numerics::{lit, Element, Tensor};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("images must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("cannot split {examples} examples across {clients} clients")]
    TooManyClients { clients: usize, examples: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Images `[n, channels, side, side]` in `[0, 1]` with labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        let shape = inputs.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(DataError::Invalid(format!(
                "inputs must be [n, channels, side, side], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: shape[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn side(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn inputs(&self) -> &Tensor<f32> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn example_len(&self) -> usize {
        self.channels() * self.side() * self.side()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.example_len();
        &self.inputs.data()[i * n..(i + 1) * n]
    }

    /// Gathers examples into a `[b, channels, side, side]` batch.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| lit::<T>(f64::from(v))));
        }
        let shape = vec![indices.len(), self.channels(), self.side(), self.side()];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// Copies the selected examples (in the given order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (inputs, labels) = self.batch::<f32>(indices);
        Self {
            inputs,
            labels,
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Seeded shuffle split into `(first, rest)` with `round(frac·n)` examples first.
    pub fn split(&self, frac: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, "split", &[]));
        let k = ((self.len() as f64) * frac).round() as usize;
        (self.subset(&idx[..k]), self.subset(&idx[k..]))
    }

    /// Repeats every example `times` times.
    pub fn repeated(&self, times: usize) -> Self {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.subset(&idx)
    }
}
