//! Pattern-aligned residual quantization for transformer KV caches.
//!
//! Each K/V vector is matched to the nearest pattern under the min-max
//! distance and only the residual is quantized. Patterns are mined from the
//! prefill with KMeans and extended during decode with window midpoints. A
//! per-token gate falls back to plain quantization when the residual is not
//! narrow enough to pay off.

pub mod analysis;
mod bytes;
pub mod engine;
pub mod error;
pub mod gate;
pub mod patterns;
pub mod quant;
pub mod report;
pub mod stream;
pub mod tensor;
pub mod trace;
pub mod verify;

pub use engine::{
    replay_head, run_scheme_comparison, CacheKind, CacheMetrics, EngineConfig, HeadCacheState, Scheme,
    SchemeResult, Toggles,
};
pub use error::{Error, Result};
pub use gate::{decide, GateConfig, GateDecision};
pub use patterns::{match_pattern, mm_distance, PatternOrigin, PatternSet};
pub use quant::{dequantize_group, quantize_group, GroupLayout, QuantizedGroup};
pub use stream::{HeadStream, KvStream};
pub use tensor::Matrix;
