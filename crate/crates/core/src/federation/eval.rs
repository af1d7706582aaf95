use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FederationError;
use crate::adapters::ExitModel;
use crate::data::Dataset;
use crate::numerics::{Element, ParamSet};

const EVAL_BATCH: usize = 256;

/// Test accuracy per exit; `None` for exits that were not evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitAccuracy {
    /// Index `l - 1` holds exit `l`.
    pub per_exit: Vec<Option<f64>>,
    /// Unweighted mean over the evaluated exits.
    pub mean: f64,
}

impl ExitAccuracy {
    pub fn at(&self, exit: usize) -> Option<f64> {
        self.per_exit.get(exit.wrapping_sub(1)).copied().flatten()
    }

    pub fn deepest(&self) -> Option<f64> {
        self.per_exit.iter().rev().find_map(|a| *a)
    }
}

/// Accuracy of `argmax` predictions at each of `exits`.
pub fn evaluate_exits<T: Element>(
    model: &ExitModel<'_, T>,
    params: &ParamSet<T>,
    test: &Dataset,
    exits: &[usize],
) -> Result<ExitAccuracy, FederationError> {
    if test.is_empty() {
        return Err(FederationError::Config("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let per_batch = idx
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<Vec<usize>, FederationError> {
            let (images, labels) = test.batch::<T>(chunk);
            let preds = model.predict(params, &images, exits)?;
            Ok(preds
                .iter()
                .map(|p| p.iter().zip(&labels).filter(|(a, b)| a == b).count())
                .collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut correct = vec![0usize; exits.len()];
    for counts in per_batch {
        for (c, n) in correct.iter_mut().zip(counts) {
            *c += n;
        }
    }
    let mut per_exit = vec![None; model.depth()];
    for (&l, &c) in exits.iter().zip(&correct) {
        per_exit[l - 1] = Some(c as f64 / test.len() as f64);
    }
    let evaluated: Vec<f64> = per_exit.iter().flatten().copied().collect();
    let mean = evaluated.iter().sum::<f64>() / evaluated.len().max(1) as f64;
    Ok(ExitAccuracy { per_exit, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_trainable, AdapterMethod};
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::data::{synth_dataset, SynthSpec};

    fn fixture() -> (Backbone<f32>, AdapterMethod, ParamSet<f32>, Dataset) {
        let mut bb = Backbone::init(&BackboneConfig::toy(), 0).unwrap();
        bb.freeze();
        let m = AdapterMethod::default();
        let p = init_trainable(&m, &bb, 8, 1).unwrap();
        let ds = synth_dataset(&SynthSpec {
            classes: 8,
            n: 40,
            side: 16,
            channels: 1,
            cluster_std: 0.2,
            label_map_seed: 3,
            noise_seed: 4,
        })
        .unwrap();
        (bb, m, p, ds)
    }

    #[test]
    fn zero_head_scores_class_zero_share() {
        let (bb, m, mut p, ds) = fixture();
        for n in ["head.fc2.weight", "head.fc2.bias"] {
            p.get_mut(n).unwrap().value_mut().fill(0.0);
        }
        let acc = evaluate_exits(&ExitModel::new(&bb, &m), &p, &ds, &[1, 2, 3, 4]).unwrap();
        let share = ds.labels().iter().filter(|&&y| y == 0).count() as f64 / ds.len() as f64;
        assert!(acc.per_exit.iter().all(|a| *a == Some(share)));
        assert_eq!(acc.mean, share);
    }

    #[test]
    fn duplicated_test_set_same_accuracy() {
        let (bb, m, p, ds) = fixture();
        let model = ExitModel::new(&bb, &m);
        let a = evaluate_exits(&model, &p, &ds, &[1, 2, 3, 4]).unwrap();
        let b = evaluate_exits(&model, &p, &ds.repeated(2), &[1, 2, 3, 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unevaluated_exits_are_none() {
        let (bb, m, p, ds) = fixture();
        let a = evaluate_exits(&ExitModel::new(&bb, &m), &p, &ds, &[4]).unwrap();
        assert_eq!(a.per_exit[..3], [None, None, None]);
        assert_eq!(a.deepest(), a.at(4));
        assert_eq!(a.mean, a.at(4).unwrap());
    }
}
