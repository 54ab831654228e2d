//! Closed-form storage cost per committed token.
//!
//! For one cache stream (K or V) of head dimension `d` at `n` bits:
//!
//! ```text
//! bits/token = n·d                              quantized codes
//!            + 32            (per-token layout) scale + zero point, 16 bits each
//!            | 32·d / G      (per-channel)      shared by the G tokens of a block
//!            + 16                               pattern index, if patterns are on
//!            + |M|·d·16 / T                     pattern storage amortized over T tokens
//! ```
//!
//! `n = 16` stands for the unquantized fp16 reference and costs `16·d` flat.

use serde::{Deserialize, Serialize};

use crate::quant::GroupLayout;

/// Width of a stored quantization parameter (scale or zero point).
pub const PARAM_BITS: f64 = 16.0;
/// Width of the per-token pattern index.
pub const PATTERN_INDEX_BITS: f64 = 16.0;
/// Width of one stored pattern element.
pub const PATTERN_ELEMENT_BITS: f64 = 16.0;
pub const FP16_BITS: u8 = 16;

/// Everything the storage formula depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintParams {
    pub bits: u8,
    pub head_dim: usize,
    pub layout: GroupLayout,
    pub group_size: usize,
    /// `None` when the stream is quantized without patterns.
    pub pattern_set_size: Option<usize>,
    pub token_count: usize,
}

pub fn bits_per_token(p: &FootprintParams) -> f64 {
    let d = p.head_dim as f64;
    if p.bits == FP16_BITS {
        return FP16_BITS as f64 * d;
    }
    let codes = f64::from(p.bits) * d;
    let params = match p.layout {
        GroupLayout::PerToken => 2.0 * PARAM_BITS,
        GroupLayout::PerChannel => 2.0 * PARAM_BITS * d / p.group_size.max(1) as f64,
    };
    let patterns = match p.pattern_set_size {
        Some(m) => {
            let storage = m as f64 * d * PATTERN_ELEMENT_BITS;
            PATTERN_INDEX_BITS + storage / p.token_count.max(1) as f64
        }
        None => 0.0,
    };
    codes + params + patterns
}

/// Ratio of the fp16 reference cost to [`bits_per_token`].
pub fn compression_ratio(p: &FootprintParams) -> f64 {
    FP16_BITS as f64 * p.head_dim as f64 / bits_per_token(p)
}
