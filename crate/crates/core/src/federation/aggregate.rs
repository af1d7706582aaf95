use super::FederationError;
use crate::numerics::{lit, Element, ParamSet};

/// Weighted average `Σ_i (N_i / Σ_j N_j) · w_i` of client parameter sets.
///
/// Evaluated as `w_0 + Σ_i (N_i / ΣN) · (w_i − w_0)`: entries on which every
/// client agrees come back bitwise unchanged.
pub fn fedavg<T: Element>(updates: &[(ParamSet<T>, usize)]) -> Result<ParamSet<T>, FederationError> {
    let Some((reference, _)) = updates.first() else {
        return Err(FederationError::Config("fedavg needs at least one update".into()));
    };
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(FederationError::Config("fedavg weights sum to zero".into()));
    }
    for (params, _) in &updates[1..] {
        if params.len() != reference.len() {
            let missing = reference
                .names()
                .find(|n| !params.contains(n))
                .or_else(|| params.names().find(|n| !reference.contains(n)))
                .unwrap_or("<unknown>");
            return Err(FederationError::Schema(missing.to_string()));
        }
        for p in reference.iter() {
            match params.get(&p.name) {
                Some(q) if q.value().shape() == p.value().shape() => {}
                _ => return Err(FederationError::Schema(p.name.clone())),
            }
        }
    }
    let weights: Vec<T> = updates.iter().map(|(_, n)| lit(*n as f64 / total as f64)).collect();
    let mut out = reference.clone();
    for p in out.iter_mut() {
        let name = p.name.clone();
        let base = p.value().clone();
        let dst = p.value_mut().data_mut();
        for ((params, _), &w) in updates.iter().zip(&weights).skip(1) {
            let src = params.get(&name).expect("schema checked").value().data();
            for ((d, &s), &b) in dst.iter_mut().zip(src).zip(base.data()) {
                let delta = s - b;
                if delta != T::zero() {
                    *d += w * delta;
                }
            }
        }
    }
    Ok(out)
}
