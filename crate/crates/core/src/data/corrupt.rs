use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::numerics::Tensor;
use crate::rng;

/// Additive Gaussian pixel noise with standard deviation `0.1 · severity`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn std(&self) -> f64 {
        0.1 * f64::from(self.severity)
    }
}

pub fn corrupt(ds: &Dataset, spec: &CorruptionSpec) -> Result<Dataset, DataError> {
    if spec.severity > 5 {
        return Err(DataError::Invalid(format!(
            "corruption severity {} outside [0, 5]",
            spec.severity
        )));
    }
    if spec.severity == 0 {
        return Ok(ds.clone());
    }
    let noise = Normal::new(0.0, spec.std()).unwrap();
    let mut rng = rng::stream(spec.seed, "corrupt", &[]);
    let data = ds
        .inputs()
        .data()
        .iter()
        .map(|&v| (v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0))
        .collect();
    let inputs = Tensor::new(ds.inputs().shape().to_vec(), data).expect("same shape");
    Dataset::new(inputs, ds.labels().to_vec(), ds.num_classes())
}
