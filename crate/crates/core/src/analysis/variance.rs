//! Law-of-total-variance split of a set of vectors under a pattern partition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::PatternSet;
use crate::tensor::Matrix;

/// Population variances, per dimension and summed over dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub total_var: f64,
    /// `E[Var(Z | M)]`
    pub intra_pattern: f64,
    /// `Var(E[Z | M])`
    pub inter_pattern: f64,
    pub per_dim_total: Vec<f64>,
    pub per_dim_intra: Vec<f64>,
    pub per_dim_inter: Vec<f64>,
}

impl VarianceReport {
    /// `|total - (intra + inter)| / total`, or the absolute gap when the
    /// total is zero.
    pub fn identity_error(&self) -> f64 {
        let gap = (self.total_var - self.intra_pattern - self.inter_pattern).abs();
        if self.total_var > 0.0 {
            gap / self.total_var
        } else {
            gap
        }
    }
}

/// Split the variance of `vectors` by the partition `assignment`, which maps
/// each row to a pattern index of `patterns`. Group means are the empirical
/// conditional expectations, not the pattern vectors themselves.
pub fn variance_decomposition(
    vectors: &Matrix,
    assignment: &[usize],
    patterns: &PatternSet,
) -> Result<VarianceReport> {
    if assignment.len() != vectors.rows() {
        return Err(Error::usage(format!(
            "{} assignments for {} vectors",
            assignment.len(),
            vectors.rows()
        )));
    }
    if vectors.is_empty() {
        return Err(Error::usage("variance of an empty set"));
    }
    if let Some((i, &a)) = assignment.iter().enumerate().find(|(_, &a)| a >= patterns.len()) {
        return Err(Error::usage(format!(
            "vector {i} assigned to pattern {a}, set has {}",
            patterns.len()
        )));
    }
    decompose(vectors, assignment, patterns.len())
}

/// Same split for an arbitrary labelling with `groups` labels.
pub fn decompose(vectors: &Matrix, assignment: &[usize], groups: usize) -> Result<VarianceReport> {
    let n = vectors.rows() as f64;
    let d = vectors.cols();
    let mut counts = vec![0usize; groups];
    let mut sums = vec![vec![0.0; d]; groups];
    let mut total_sum = vec![0.0; d];
    for (row, &g) in vectors.iter_rows().zip(assignment) {
        if g >= groups {
            return Err(Error::usage(format!("label {g} out of range")));
        }
        counts[g] += 1;
        for j in 0..d {
            sums[g][j] += row[j];
            total_sum[j] += row[j];
        }
    }
    let mean: Vec<f64> = total_sum.iter().map(|s| s / n).collect();
    let group_means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| if c > 0 { v / c as f64 } else { 0.0 }).collect())
        .collect();

    let mut per_dim_total = vec![0.0; d];
    let mut per_dim_intra = vec![0.0; d];
    for (row, &g) in vectors.iter_rows().zip(assignment) {
        for j in 0..d {
            per_dim_total[j] += (row[j] - mean[j]).powi(2);
            per_dim_intra[j] += (row[j] - group_means[g][j]).powi(2);
        }
    }
    let mut per_dim_inter = vec![0.0; d];
    for (gm, &c) in group_means.iter().zip(&counts) {
        for j in 0..d {
            per_dim_inter[j] += c as f64 * (gm[j] - mean[j]).powi(2);
        }
    }
    for v in per_dim_total
        .iter_mut()
        .chain(per_dim_intra.iter_mut())
        .chain(per_dim_inter.iter_mut())
    {
        *v /= n;
    }
    Ok(VarianceReport {
        total_var: per_dim_total.iter().sum(),
        intra_pattern: per_dim_intra.iter().sum(),
        inter_pattern: per_dim_inter.iter().sum(),
        per_dim_total,
        per_dim_intra,
        per_dim_inter,
    })
}
