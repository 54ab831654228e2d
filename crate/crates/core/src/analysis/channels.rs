//! Per-channel magnitude statistics of a stream, for spotting outlier
//! channels.

use serde::{Deserialize, Serialize};

use crate::engine::CacheKind;
use crate::stream::KvStream;
use crate::tensor::{min_max, Matrix};

pub const DEFAULT_OUTLIER_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub layer: usize,
    pub head: usize,
    pub kind: CacheKind,
    pub mean_abs: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub median_mean_abs: f64,
    /// Channels whose mean |x| exceeds `factor` times the median channel.
    pub outliers: Vec<usize>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn stats_of(m: &Matrix, layer: usize, head: usize, kind: CacheKind, factor: f64) -> ChannelStats {
    let rows = m.rows().max(1) as f64;
    let mut mean_abs = Vec::with_capacity(m.cols());
    let mut min = Vec::with_capacity(m.cols());
    let mut max = Vec::with_capacity(m.cols());
    for c in 0..m.cols() {
        let col = m.column(c);
        mean_abs.push(col.iter().map(|v| v.abs()).sum::<f64>() / rows);
        let (lo, hi) = min_max(&col).unwrap_or((0.0, 0.0));
        min.push(lo);
        max.push(hi);
    }
    let med = median(&mean_abs);
    let outliers = mean_abs
        .iter()
        .enumerate()
        .filter(|&(_, &a)| a > factor * med)
        .map(|(c, _)| c)
        .collect();
    ChannelStats {
        layer,
        head,
        kind,
        mean_abs,
        min,
        max,
        median_mean_abs: med,
        outliers,
    }
}

/// K and V statistics for every head, in canonical order.
pub fn channel_stats(stream: &KvStream, outlier_factor: f64) -> Vec<ChannelStats> {
    stream
        .heads
        .iter()
        .flat_map(|h| {
            [
                stats_of(&h.k, h.layer, h.head, CacheKind::K, outlier_factor),
                stats_of(&h.v, h.layer, h.head, CacheKind::V, outlier_factor),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::HeadStream;

    #[test]
    fn flags_large_channel() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![1.0, -1.0, 40.0 + t as f64, 0.5]).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let stream = KvStream {
            num_layers: 1,
            num_heads: 1,
            head_dim: 4,
            prefill_len: 10,
            decode_len: 0,
            heads: vec![HeadStream {
                layer: 0,
                head: 0,
                k: m.clone(),
                v: m,
            }],
            token_ids: None,
        };
        let stats = channel_stats(&stream, 5.0);
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].outliers, vec![2]);
        assert_eq!(stats[0].median_mean_abs, 1.0);
        assert_eq!(stats[0].max[2], 49.0);
    }
}
