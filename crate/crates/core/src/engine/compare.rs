//! Replay one token stream through several cache configurations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EngineConfig;
use super::metrics::{CacheMetrics, HeadSummary};
use super::state::HeadCacheState;
use crate::error::{Error, Result};
use crate::stream::{HeadStream, KvStream};

pub const RAW_SCHEME: &str = "raw";
pub const PATTERNKV_SCHEME: &str = "patternkv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub name: String,
    pub config: EngineConfig,
}

impl Scheme {
    pub fn new(name: impl Into<String>, config: EngineConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeResult {
    pub name: String,
    pub config: EngineConfig,
    pub metrics: CacheMetrics,
    pub heads: Vec<HeadSummary>,
}

/// Append a plain-quantization baseline named [`RAW_SCHEME`] with the
/// geometry of the first scheme, unless one is already present.
pub fn with_raw_baseline(mut schemes: Vec<Scheme>) -> Vec<Scheme> {
    if let Some(first) = schemes.first() {
        if !schemes.iter().any(|s| s.name == RAW_SCHEME) {
            let raw = Scheme::new(RAW_SCHEME, first.config.raw_baseline());
            schemes.push(raw);
        }
    }
    schemes
}

/// Seed for one head's pattern mining, derived from the run seed.
pub fn head_seed(seed: u64, layer: usize, head: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ ((layer as u64) << 32 | head as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Prefill with the first `prefill_len` rows, then append the rest one
/// token at a time.
pub fn replay_head(head: &HeadStream, prefill_len: usize, config: &EngineConfig) -> Result<HeadCacheState> {
    let config = EngineConfig {
        seed: head_seed(config.seed, head.layer, head.head),
        ..config.clone()
    };
    let total = head.k.rows();
    if prefill_len == 0 || prefill_len > total {
        return Err(Error::usage(format!(
            "prefill length {prefill_len} invalid for a stream of {total} tokens"
        )));
    }
    let mut state = HeadCacheState::prefill(
        &head.k.slice_rows(0, prefill_len),
        &head.v.slice_rows(0, prefill_len),
        &config,
    )?;
    for t in prefill_len..total {
        state.append_decode_token(head.k.row(t), head.v.row(t))?;
    }
    Ok(state)
}

/// Run every scheme over every head of `stream`. Heads are processed in
/// parallel; results are assembled in canonical (layer, head) order.
pub fn run_scheme_comparison(stream: &KvStream, schemes: &[Scheme]) -> Result<Vec<SchemeResult>> {
    stream.validate()?;
    if schemes.is_empty() {
        return Err(Error::usage("no schemes to compare"));
    }
    for s in schemes {
        s.config.validate()?;
    }
    schemes
        .iter()
        .map(|scheme| {
            let states: Vec<HeadCacheState> = stream
                .heads
                .par_iter()
                .map(|h| replay_head(h, stream.prefill_len, &scheme.config))
                .collect::<Result<_>>()?;
            let refs: Vec<&HeadCacheState> = states.iter().collect();
            Ok(SchemeResult {
                name: scheme.name.clone(),
                config: scheme.config.clone(),
                metrics: CacheMetrics::from_heads(&refs),
                heads: stream
                    .heads
                    .iter()
                    .zip(&states)
                    .map(|(h, s)| HeadSummary::of(h.layer, h.head, s))
                    .collect(),
            })
        })
        .collect()
}
