//! Per-head pattern-aligned KV cache.
//!
//! Prefill mines K and V pattern sets per head, then commits every whole
//! block of tokens that precedes the full-precision window. Decode appends
//! grow the window; once it holds `residual_window + group_size` tokens the
//! oldest `group_size` are flushed. A flush first appends the flushed
//! window's Chebyshev center to each pattern set, then aligns every flushed
//! vector to its nearest pattern, gates V, and quantizes the residuals:
//! K per channel across the block, V per token.

mod compare;
mod config;
mod metrics;
pub mod snapshot;
mod state;

pub use compare::{
    head_seed, replay_head, run_scheme_comparison, with_raw_baseline, Scheme, SchemeResult, PATTERNKV_SCHEME,
    RAW_SCHEME,
};
pub use config::{
    EngineConfig, Toggles, DEFAULT_GROUP_SIZE, DEFAULT_PATTERN_COUNT, DEFAULT_RESIDUAL_WINDOW, MAX_PATTERNS,
};
pub use metrics::{CacheMetrics, HeadSummary, StreamMetrics, Summary};
pub use state::{BlockRecord, CacheKind, CommittedBlock, HeadCacheState, StreamState, TokenRecord};
