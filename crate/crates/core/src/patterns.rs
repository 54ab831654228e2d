//! Pattern mining and matching.
//!
//! Prefill patterns are KMeans centroids of a head's vectors. During decode,
//! each flushed window contributes one extra pattern: its per-dimension
//! Chebyshev center. Vectors are matched to the pattern that minimizes the
//! min-max width of the residual, which is exactly the range the asymmetric
//! quantizer has to cover.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::tensor::{min_max, Matrix};

/// Lloyd iteration cap.
pub const KMEANS_MAX_ITERS: usize = 25;
/// Stop once the relative objective improvement drops below this.
pub const KMEANS_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternOrigin {
    PrefillMined,
    DecodeGenerated,
}

impl PatternOrigin {
    pub fn tag(self) -> u8 {
        match self {
            PatternOrigin::PrefillMined => 0,
            PatternOrigin::DecodeGenerated => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(PatternOrigin::PrefillMined),
            1 => Some(PatternOrigin::DecodeGenerated),
            _ => None,
        }
    }
}

/// Append-only set of pattern vectors for one (layer, head, K|V) stream.
///
/// Indices are stable: once a pattern is pushed it never moves or changes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    dim: usize,
    patterns: Vec<Vec<f64>>,
    origins: Vec<PatternOrigin>,
    capacity_hint: usize,
}

impl PatternSet {
    pub fn new(dim: usize, capacity_hint: usize) -> Self {
        Self {
            dim,
            patterns: Vec::with_capacity(capacity_hint),
            origins: Vec::with_capacity(capacity_hint),
            capacity_hint,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn capacity_hint(&self) -> usize {
        self.capacity_hint
    }

    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.patterns.get(index).map(Vec::as_slice)
    }

    pub fn origin(&self, index: usize) -> Option<PatternOrigin> {
        self.origins.get(index).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.patterns.iter().map(Vec::as_slice)
    }

    pub fn count_origin(&self, origin: PatternOrigin) -> usize {
        self.origins.iter().filter(|&&o| o == origin).count()
    }

    /// Append a pattern and return its index.
    pub fn push(&mut self, pattern: Vec<f64>, origin: PatternOrigin) -> Result<usize> {
        if pattern.len() != self.dim {
            return Err(Error::usage(format!(
                "pattern has dimension {}, set expects {}",
                pattern.len(),
                self.dim
            )));
        }
        check_finite(&pattern)?;
        self.patterns.push(pattern);
        self.origins.push(origin);
        Ok(self.patterns.len() - 1)
    }
}

/// A vector aligned to its nearest pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternAssignment {
    pub pattern_index: usize,
    pub residual: Vec<f64>,
    pub mm_distance: f64,
}

/// Min-max distance: `max_i(x_i - m_i) - min_j(x_j - m_j)`.
pub fn mm_distance(x: &[f64], m: &[f64]) -> Result<f64> {
    if x.len() != m.len() {
        return Err(Error::usage(format!(
            "dimension mismatch: vector {} vs pattern {}",
            x.len(),
            m.len()
        )));
    }
    Ok(mm_distance_unchecked(x, m))
}

#[inline]
fn mm_distance_unchecked(x: &[f64], m: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (a, b) in x.iter().zip(m) {
        let r = a - b;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if x.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Nearest pattern under [`mm_distance`]; ties go to the lowest index.
pub fn match_pattern(x: &[f64], set: &PatternSet) -> Result<PatternAssignment> {
    if set.is_empty() {
        return Err(Error::usage("cannot match against an empty pattern set"));
    }
    if x.len() != set.dim() {
        return Err(Error::usage(format!(
            "dimension mismatch: vector {} vs pattern set {}",
            x.len(),
            set.dim()
        )));
    }
    let (pattern_index, mm) = set.iter().map(|m| mm_distance_unchecked(x, m)).enumerate().fold(
        (0, f64::INFINITY),
        |best, (i, d)| {
            if d < best.1 {
                (i, d)
            } else {
                best
            }
        },
    );
    let pattern = set.get(pattern_index).expect("index from iteration");
    let residual = x.iter().zip(pattern).map(|(a, b)| a - b).collect();
    Ok(PatternAssignment {
        pattern_index,
        residual,
        mm_distance: mm,
    })
}

/// Undo residualization: `pattern + residual`.
pub fn reconstruct(pattern_index: usize, set: &PatternSet, residual: &[f64]) -> Result<Vec<f64>> {
    let pattern = set.get(pattern_index).ok_or_else(|| {
        Error::corrupt(format!(
            "pattern index {pattern_index} is out of range for a set of {}",
            set.len()
        ))
    })?;
    if residual.len() != pattern.len() {
        return Err(Error::usage(format!(
            "residual has dimension {}, pattern has {}",
            residual.len(),
            pattern.len()
        )));
    }
    Ok(pattern.iter().zip(residual).map(|(p, r)| p + r).collect())
}

/// Per-dimension midpoint of a window: the l-infinity Chebyshev center.
pub fn generate_decode_pattern(window: &Matrix) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(Error::usage("cannot build a pattern from an empty window"));
    }
    Ok((0..window.cols())
        .map(|c| {
            let col = window.column(c);
            let (lo, hi) = min_max(&col).expect("non-empty window");
            0.5 * (lo + hi)
        })
        .collect())
}

/// Result of a KMeans run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step, starting
    /// with the partition induced by the seeded centroids.
    pub objective_history: Vec<f64>,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one entry")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .map(|c| sq_dist(x, c))
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |best, (i, d)| if d < best.1 { (i, d) } else { best },
        )
}

fn count_distinct(vectors: &Matrix) -> usize {
    // -0.0 and 0.0 are the same point
    let key = |row: &[f64]| -> Vec<u64> { row.iter().map(|v| (v + 0.0).to_bits()).collect() };
    vectors.iter_rows().map(key).collect::<HashSet<_>>().len()
}

/// Lloyd's KMeans under the squared Euclidean metric.
///
/// Seeding picks a random start point from `seed`, then greedily adds the
/// point farthest from the centroids chosen so far. The effective cluster
/// count is `min(k, distinct rows)`.
pub fn kmeans(vectors: &Matrix, k: usize, seed: u64) -> Result<KMeansFit> {
    if vectors.is_empty() {
        return Err(Error::usage("kmeans needs at least one vector"));
    }
    if k == 0 {
        return Err(Error::usage("kmeans needs k >= 1"));
    }
    if vectors.cols() == 0 {
        return Err(Error::usage("kmeans needs vectors of dimension >= 1"));
    }
    check_finite(vectors.as_slice())?;

    let n = vectors.rows();
    let k_eff = k.min(count_distinct(vectors));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let start = rng.random_range(0..n);
    let mut centroids = vec![vectors.row(start).to_vec()];
    let mut min_d: Vec<f64> = vectors.iter_rows().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k_eff {
        let far = min_d
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &d)| if d > best.1 { (i, d) } else { best },
            )
            .0;
        let c = vectors.row(far).to_vec();
        for (d, row) in min_d.iter_mut().zip(vectors.iter_rows()) {
            *d = d.min(sq_dist(row, &c));
        }
        centroids.push(c);
    }

    let mut assignment = vec![0usize; n];
    let mut point_cost = vec![0.0f64; n];
    let assign = |centroids: &[Vec<f64>], assignment: &mut [usize], cost: &mut [f64]| -> f64 {
        let mut total = 0.0;
        for (i, row) in vectors.iter_rows().enumerate() {
            let (j, d) = nearest(row, centroids);
            assignment[i] = j;
            cost[i] = d;
            total += d;
        }
        total
    };

    let mut history = vec![assign(&centroids, &mut assignment, &mut point_cost)];
    for _ in 0..KMEANS_MAX_ITERS {
        update_means(vectors, &assignment, &mut centroids);
        repair_empty(vectors, &mut assignment, &mut point_cost, &mut centroids);
        let prev = *history.last().unwrap();
        let obj = assign(&centroids, &mut assignment, &mut point_cost);
        history.push(obj);
        let improvement = prev - obj;
        if prev <= 0.0 || improvement <= KMEANS_REL_TOL * prev {
            break;
        }
    }
    // centroids must be the means of the partition that is returned
    update_means(vectors, &assignment, &mut centroids);

    Ok(KMeansFit {
        centroids,
        assignment,
        objective_history: history,
    })
}

fn update_means(vectors: &Matrix, assignment: &[usize], centroids: &mut [Vec<f64>]) {
    let d = vectors.cols();
    let mut sums = vec![vec![0.0; d]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (row, &j) in vectors.iter_rows().zip(assignment) {
        counts[j] += 1;
        for (s, v) in sums[j].iter_mut().zip(row) {
            *s += v;
        }
    }
    for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
}

/// Give each empty cluster the point that currently sits farthest from its
/// own centroid (taken only from clusters with more than one member).
fn repair_empty(
    vectors: &Matrix,
    assignment: &mut [usize],
    point_cost: &mut [f64],
    centroids: &mut [Vec<f64>],
) {
    let mut counts = vec![0usize; centroids.len()];
    for &j in assignment.iter() {
        counts[j] += 1;
    }
    for empty in 0..centroids.len() {
        if counts[empty] != 0 {
            continue;
        }
        let donor = (0..assignment.len()).filter(|&i| counts[assignment[i]] > 1).fold(
            None,
            |best: Option<usize>, i| match best {
                Some(b) if point_cost[b] >= point_cost[i] => Some(b),
                _ => Some(i),
            },
        );
        let Some(i) = donor else { break };
        counts[assignment[i]] -= 1;
        counts[empty] = 1;
        assignment[i] = empty;
        point_cost[i] = 0.0;
        centroids[empty] = vectors.row(i).to_vec();
    }
}

/// Mine the prefill pattern set of one head via [`kmeans`].
pub fn mine_prefill_patterns(vectors: &Matrix, k: usize, seed: u64) -> Result<PatternSet> {
    let fit = kmeans(vectors, k, seed)?;
    let mut set = PatternSet::new(vectors.cols(), k);
    for c in fit.centroids {
        set.push(c, PatternOrigin::PrefillMined)?;
    }
    Ok(set)
}
