use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::DEFAULT_ALPHA;
use crate::quant::{validate_bits, GroupLayout};

pub const DEFAULT_PATTERN_COUNT: usize = 32;
pub const DEFAULT_GROUP_SIZE: usize = 128;
pub const DEFAULT_RESIDUAL_WINDOW: usize = 128;

/// Largest pattern set a stream may grow to; index `u16::MAX` marks a token
/// stored without a pattern.
pub const MAX_PATTERNS: usize = u16::MAX as usize;

/// Component switches, mirroring the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub use_k_patterns: bool,
    pub use_v_patterns: bool,
    pub generate_new_patterns: bool,
    pub use_v_gate: bool,
    /// Apply the flattening gate to K as well. Off by default.
    pub use_k_gate: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_k_patterns: true,
            use_v_patterns: true,
            generate_new_patterns: true,
            use_v_gate: true,
            use_k_gate: false,
        }
    }
}

impl Toggles {
    /// Plain quantization with no pattern alignment anywhere.
    pub fn raw() -> Self {
        Self {
            use_k_patterns: false,
            use_v_patterns: false,
            generate_new_patterns: false,
            use_v_gate: false,
            use_k_gate: false,
        }
    }

    pub fn uses_patterns(&self) -> bool {
        self.use_k_patterns || self.use_v_patterns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub bits: u8,
    pub pattern_count: usize,
    pub group_size: usize,
    pub residual_window: usize,
    pub alpha: f64,
    pub seed: u64,
    pub k_layout: GroupLayout,
    pub v_layout: GroupLayout,
    pub toggles: Toggles,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            pattern_count: DEFAULT_PATTERN_COUNT,
            group_size: DEFAULT_GROUP_SIZE,
            residual_window: DEFAULT_RESIDUAL_WINDOW,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            k_layout: GroupLayout::PerChannel,
            v_layout: GroupLayout::PerToken,
            toggles: Toggles::default(),
        }
    }
}

impl EngineConfig {
    pub fn with_bits(bits: u8) -> Self {
        Self {
            bits,
            ..Self::default()
        }
    }

    /// The same geometry with every pattern component switched off.
    pub fn raw_baseline(&self) -> Self {
        Self {
            toggles: Toggles::raw(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_bits(self.bits)?;
        if self.group_size == 0 {
            return Err(Error::usage("group size must be >= 1"));
        }
        if self.residual_window < self.group_size {
            return Err(Error::usage(format!(
                "residual window ({}) must be at least the group size ({})",
                self.residual_window, self.group_size
            )));
        }
        if self.pattern_count == 0 || self.pattern_count > MAX_PATTERNS {
            return Err(Error::usage(format!(
                "pattern count must be in 1..={MAX_PATTERNS}, got {}",
                self.pattern_count
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::usage(format!(
                "alpha must lie in (0, 0.5], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}
