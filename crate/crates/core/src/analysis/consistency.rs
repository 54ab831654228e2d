//! Token-to-cluster consistency `C_t = max_k n_{t,k} / Σ_k n_{t,k}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// `C_t` for every token id seen at least twice.
    pub per_token: BTreeMap<u32, f64>,
    /// Mean of `per_token`; `None` when no token repeats.
    pub aggregate: Option<f64>,
}

pub fn consistency_metric(token_ids: &[u32], cluster_ids: &[usize]) -> Result<ConsistencyReport> {
    if token_ids.len() != cluster_ids.len() {
        return Err(Error::usage(format!(
            "{} token ids but {} cluster ids",
            token_ids.len(),
            cluster_ids.len()
        )));
    }
    let mut counts: BTreeMap<u32, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&t, &c) in token_ids.iter().zip(cluster_ids) {
        *counts.entry(t).or_default().entry(c).or_default() += 1;
    }
    let per_token: BTreeMap<u32, f64> = counts
        .into_iter()
        .filter_map(|(t, by_cluster)| {
            let total: usize = by_cluster.values().sum();
            let top = by_cluster.values().copied().max().unwrap_or(0);
            (total >= 2).then(|| (t, top as f64 / total as f64))
        })
        .collect();
    let aggregate = (!per_token.is_empty()).then(|| per_token.values().sum::<f64>() / per_token.len() as f64);
    Ok(ConsistencyReport { per_token, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let r = consistency_metric(&[5, 5, 5, 5], &[2, 2, 2, 2]).unwrap();
        assert_eq!(r.per_token[&5], 1.0);
        let r = consistency_metric(&[9, 9, 9, 9], &[1, 1, 1, 3]).unwrap();
        assert_eq!(r.per_token[&9], 0.75);
        let r = consistency_metric(&[1; 6], &[0, 1, 2, 0, 1, 2]).unwrap();
        assert!((r.per_token[&1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn singletons_excluded() {
        let r = consistency_metric(&[1, 2, 2, 3], &[0, 1, 0, 4]).unwrap();
        assert_eq!(r.per_token.len(), 1);
        assert_eq!(r.aggregate, Some(0.5));
        let r = consistency_metric(&[1, 2], &[0, 0]).unwrap();
        assert_eq!(r.aggregate, None);
        assert!(consistency_metric(&[1], &[]).is_err());
    }
}
