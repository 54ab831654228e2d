//! Aggregated error, range and storage statistics over committed tokens.

use serde::{Deserialize, Serialize};

use super::state::{HeadCacheState, StreamState};
use crate::analysis::memory::{bits_per_token, FP16_BITS};

/// Order statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
        Some(Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            min: sorted[0],
            p25: q(0.25),
            p50: q(0.5),
            p75: q(0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMetrics {
    pub committed_tokens: usize,
    /// Mean squared reconstruction error per committed element.
    pub mse: f64,
    pub mean_r_raw: f64,
    /// Mean min-max distance to the matched pattern.
    pub mean_r_flat: Option<f64>,
    /// Distribution of `r_flat / r_raw` over tokens with a non-zero raw range.
    pub rho: Option<Summary>,
    /// Fraction of committed tokens stored as a residual against a pattern.
    pub pattern_utilization: f64,
    /// Fraction of gated tokens the gate flattened, when the gate ran.
    pub gate_acceptance_rate: Option<f64>,
    /// Gate-safety violations: flattened tokens with `rho > rho*`. Always 0.
    pub gate_violations: usize,
    pub mean_raw_group_range: f64,
    pub mean_quantized_group_range: f64,
    pub mean_pattern_count: f64,
    pub bits_per_token: f64,
}

/// Per-token reconstruction error of one head, both streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub committed_tokens: usize,
    pub k_mse: f64,
    pub v_mse: f64,
    pub k_patterns: usize,
    pub v_patterns: usize,
    pub v_pattern_utilization: f64,
}

impl HeadSummary {
    pub fn of(layer: usize, head: usize, state: &HeadCacheState) -> Self {
        let k = StreamMetrics::from_streams(&[state], |s| &s.k);
        let v = StreamMetrics::from_streams(&[state], |s| &s.v);
        Self {
            layer,
            head,
            committed_tokens: state.committed_tokens(),
            k_mse: k.mse,
            v_mse: v.mse,
            k_patterns: state.k.patterns.len(),
            v_patterns: state.v.patterns.len(),
            v_pattern_utilization: v.pattern_utilization,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMetrics {
    pub total_tokens: usize,
    pub committed_tokens: usize,
    pub k: StreamMetrics,
    pub v: StreamMetrics,
    /// Mean squared error over all committed K and V elements.
    pub mse: f64,
    /// Share of committed V tokens quantized as residuals.
    pub v_gate_acceptance_rate: f64,
    /// K plus V storage per committed token.
    pub bits_per_token: f64,
}

impl CacheMetrics {
    pub fn from_heads(states: &[&HeadCacheState]) -> Self {
        let k = StreamMetrics::from_streams(states, |s| &s.k);
        let v = StreamMetrics::from_streams(states, |s| &s.v);
        // both streams commit the same tokens at the same width
        let mse = 0.5 * (k.mse + v.mse);
        Self {
            total_tokens: states.iter().map(|s| s.token_count()).sum(),
            committed_tokens: k.committed_tokens,
            mse,
            v_gate_acceptance_rate: v.pattern_utilization,
            bits_per_token: k.bits_per_token + v.bits_per_token,
            k,
            v,
        }
    }
}

fn dim_of(states: &[&HeadCacheState]) -> usize {
    states.first().map(|s| s.dim()).unwrap_or(0)
}

impl StreamMetrics {
    fn from_streams(states: &[&HeadCacheState], pick: impl Fn(&HeadCacheState) -> &StreamState) -> Self {
        let mut committed = 0usize;
        let mut elements = 0usize;
        let mut sq = 0.0;
        let mut r_raw_sum = 0.0;
        let mut r_flat_sum = 0.0;
        let mut r_flat_n = 0usize;
        let mut rhos = Vec::new();
        let mut flattened = 0usize;
        let mut gated = 0usize;
        let mut accepted = 0usize;
        let mut violations = 0usize;
        let mut raw_group = 0.0;
        let mut quant_group = 0.0;
        let mut blocks = 0usize;
        let mut pattern_count = 0.0;
        let mut bits_weighted = 0.0;

        for state in states {
            let s = pick(state);
            let rho_star = state.gate_config().rho_star;
            let n = s.records.len();
            committed += n;
            elements += n * s.dim();
            for r in &s.records {
                sq += r.sq_err;
                r_raw_sum += r.r_raw;
                if let Some(f) = r.r_flat {
                    r_flat_sum += f;
                    r_flat_n += 1;
                    if r.r_raw > 0.0 {
                        rhos.push(f / r.r_raw);
                    }
                }
                if r.flattened {
                    flattened += 1;
                }
                if let Some(g) = r.gate {
                    gated += 1;
                    if g.flatten {
                        accepted += 1;
                        if g.r_flat > rho_star * g.r_raw {
                            violations += 1;
                        }
                    }
                }
            }
            for b in &s.block_records {
                raw_group += b.mean_raw_group_range;
                quant_group += b.mean_quantized_group_range;
                blocks += 1;
            }
            pattern_count += s.patterns.len() as f64;
            let cfg = state.config();
            bits_weighted += bits_per_token(&s.footprint(cfg.bits, cfg.group_size)) * n as f64;
        }

        let per = |num: f64, den: usize| if den > 0 { num / den as f64 } else { 0.0 };
        let fp16 = f64::from(FP16_BITS) * dim_of(states) as f64;
        Self {
            committed_tokens: committed,
            mse: per(sq, elements),
            mean_r_raw: per(r_raw_sum, committed),
            mean_r_flat: (r_flat_n > 0).then(|| per(r_flat_sum, r_flat_n)),
            rho: Summary::of(&rhos),
            pattern_utilization: per(flattened as f64, committed),
            gate_acceptance_rate: (gated > 0).then(|| per(accepted as f64, gated)),
            gate_violations: violations,
            mean_raw_group_range: per(raw_group, blocks),
            mean_quantized_group_range: per(quant_group, blocks),
            mean_pattern_count: per(pattern_count, states.len()),
            bits_per_token: if committed > 0 {
                bits_weighted / committed as f64
            } else {
                fp16
            },
        }
    }
}
