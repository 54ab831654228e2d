//! Per-head cache lifecycle: prefill, windowed decode flushes, reconstruction.

use serde::{Deserialize, Serialize};

use super::config::{EngineConfig, MAX_PATTERNS};
use crate::analysis::memory::FootprintParams;
use crate::error::{check_finite, Error, Result};
use crate::gate::{decide, GateConfig, GateDecision};
use crate::patterns::{
    generate_decode_pattern, match_pattern, mine_prefill_patterns, PatternOrigin, PatternSet,
};
use crate::quant::{dequantize_group, quantize_group, GroupLayout, QuantizedGroup};
use crate::tensor::{range, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheKind {
    K,
    V,
}

/// One flushed block of `group_size` tokens for a single stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CommittedBlock {
    pub tokens: usize,
    /// Pattern used per token; `None` means the raw vector was quantized.
    pub pattern_indices: Vec<Option<usize>>,
    /// Gate outcome per token, present only when the gate ran.
    pub gates: Vec<Option<GateDecision>>,
    /// `d` groups (per-channel) or `tokens` groups (per-token).
    pub groups: Vec<QuantizedGroup>,
}

impl CommittedBlock {
    /// Quantized target (residual or raw) of every token, row-major.
    fn dequantize(&self, dim: usize) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.tokens, dim);
        for (g, group) in self.groups.iter().enumerate() {
            let values = dequantize_group(group)?;
            match group.layout {
                GroupLayout::PerChannel => {
                    if values.len() != self.tokens {
                        return Err(Error::corrupt("channel group length mismatch"));
                    }
                    for (t, v) in values.into_iter().enumerate() {
                        out.row_mut(t)[g] = v;
                    }
                }
                GroupLayout::PerToken => {
                    if values.len() != dim {
                        return Err(Error::corrupt("token group length mismatch"));
                    }
                    out.row_mut(g).copy_from_slice(&values);
                }
            }
        }
        Ok(out)
    }

    fn dequantize_token(&self, offset: usize, dim: usize) -> Result<Vec<f64>> {
        match self.groups.first().map(|g| g.layout) {
            Some(GroupLayout::PerToken) => dequantize_group(&self.groups[offset]),
            Some(GroupLayout::PerChannel) => {
                if self.groups.len() != dim {
                    return Err(Error::corrupt("block has wrong number of channel groups"));
                }
                self.groups
                    .iter()
                    .map(|g| Ok(g.params.decode(g.code_at(offset)?)))
                    .collect()
            }
            None => Err(Error::corrupt("committed block without groups")),
        }
    }
}

/// Per-token bookkeeping recorded at commit time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    /// Sum of squared reconstruction errors over the token's channels.
    pub sq_err: f64,
    /// Range of the raw vector.
    pub r_raw: f64,
    /// Min-max distance to the matched pattern, when patterns are enabled.
    pub r_flat: Option<f64>,
    pub flattened: bool,
    pub gate: Option<GateDecision>,
}

/// Per-block range statistics for per-channel groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    /// Mean over channels of the raw channel range within the block.
    pub mean_raw_group_range: f64,
    /// Mean over groups of the range that was actually quantized.
    pub mean_quantized_group_range: f64,
}

/// State of one cache stream (K or V) of one head.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub kind: CacheKind,
    pub layout: GroupLayout,
    pub use_patterns: bool,
    pub use_gate: bool,
    pub patterns: PatternSet,
    pub blocks: Vec<CommittedBlock>,
    pub window: Matrix,
    pub records: Vec<TokenRecord>,
    pub block_records: Vec<BlockRecord>,
}

impl StreamState {
    fn new(kind: CacheKind, dim: usize, config: &EngineConfig) -> Self {
        let (layout, use_patterns, use_gate) = match kind {
            CacheKind::K => (
                config.k_layout,
                config.toggles.use_k_patterns,
                config.toggles.use_k_patterns && config.toggles.use_k_gate,
            ),
            CacheKind::V => (
                config.v_layout,
                config.toggles.use_v_patterns,
                config.toggles.use_v_patterns && config.toggles.use_v_gate,
            ),
        };
        Self {
            kind,
            layout,
            use_patterns,
            use_gate,
            patterns: PatternSet::new(dim, config.pattern_count),
            blocks: Vec::new(),
            window: Matrix::empty(dim),
            records: Vec::new(),
            block_records: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.window.cols()
    }

    pub fn committed_tokens(&self) -> usize {
        self.blocks.iter().map(|b| b.tokens).sum()
    }

    /// Align, gate and quantize one block, recording error statistics
    /// against the original rows.
    fn commit(&mut self, rows: &Matrix, bits: u8, gate: &GateConfig) -> Result<()> {
        let dim = rows.cols();
        let mut targets = Matrix::zeros(rows.rows(), dim);
        let mut pattern_indices = Vec::with_capacity(rows.rows());
        let mut gates = Vec::with_capacity(rows.rows());
        let mut pending = Vec::with_capacity(rows.rows());

        for (t, x) in rows.iter_rows().enumerate() {
            let r_raw = range(x);
            if !self.use_patterns {
                targets.row_mut(t).copy_from_slice(x);
                pattern_indices.push(None);
                gates.push(None);
                pending.push((r_raw, None, false, None));
                continue;
            }
            let assignment = match_pattern(x, &self.patterns)?;
            let r_flat = assignment.mm_distance;
            let decision = if self.use_gate {
                Some(decide(r_raw, r_flat, gate)?)
            } else {
                None
            };
            let flatten = decision.is_none_or(|d| d.flatten);
            if flatten {
                targets.row_mut(t).copy_from_slice(&assignment.residual);
                pattern_indices.push(Some(assignment.pattern_index));
            } else {
                targets.row_mut(t).copy_from_slice(x);
                pattern_indices.push(None);
            }
            gates.push(decision);
            pending.push((r_raw, Some(r_flat), flatten, decision));
        }

        let groups: Vec<QuantizedGroup> = match self.layout {
            GroupLayout::PerChannel => (0..dim)
                .map(|c| quantize_group(&targets.column(c), bits, self.layout))
                .collect::<Result<_>>()?,
            GroupLayout::PerToken => targets
                .iter_rows()
                .map(|r| quantize_group(r, bits, self.layout))
                .collect::<Result<_>>()?,
        };

        let mean_of = |v: &mut dyn Iterator<Item = f64>, n: usize| v.sum::<f64>() / n.max(1) as f64;
        let block_record = BlockRecord {
            mean_raw_group_range: match self.layout {
                GroupLayout::PerChannel => mean_of(&mut (0..dim).map(|c| range(&rows.column(c))), dim),
                GroupLayout::PerToken => mean_of(&mut rows.iter_rows().map(range), rows.rows()),
            },
            mean_quantized_group_range: mean_of(
                &mut groups
                    .iter()
                    .map(|g| g.params.scale * f64::from(crate::quant::max_code(g.params.bits))),
                groups.len(),
            ),
        };

        let block = CommittedBlock {
            tokens: rows.rows(),
            pattern_indices,
            gates,
            groups,
        };
        let deq = block.dequantize(dim)?;
        for (t, (r_raw, r_flat, flattened, gate)) in pending.into_iter().enumerate() {
            let recon = self.finish_token(&block, t, deq.row(t))?;
            let sq_err = recon
                .iter()
                .zip(rows.row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            self.records.push(TokenRecord {
                sq_err,
                r_raw,
                r_flat,
                flattened,
                gate,
            });
        }
        self.blocks.push(block);
        self.block_records.push(block_record);
        Ok(())
    }

    fn finish_token(&self, block: &CommittedBlock, offset: usize, target: &[f64]) -> Result<Vec<f64>> {
        match block.pattern_indices[offset] {
            Some(idx) => crate::patterns::reconstruct(idx, &self.patterns, target),
            None => Ok(target.to_vec()),
        }
    }

    fn reconstruct_committed(&self, index: usize, group_size: usize) -> Result<Vec<f64>> {
        let block = self
            .blocks
            .get(index / group_size)
            .ok_or_else(|| Error::corrupt(format!("no committed block for token {index}")))?;
        let offset = index % group_size;
        let target = block.dequantize_token(offset, self.dim())?;
        self.finish_token(block, offset, &target)
    }

    fn push_decode_pattern(&mut self, window: &Matrix) -> Result<()> {
        if self.patterns.len() >= MAX_PATTERNS {
            return Err(Error::usage(format!(
                "{:?} pattern set reached the {MAX_PATTERNS}-entry index limit",
                self.kind
            )));
        }
        let center = generate_decode_pattern(window)?;
        self.patterns.push(center, PatternOrigin::DecodeGenerated)?;
        Ok(())
    }

    /// Storage parameters for the closed-form bits-per-token formula.
    pub fn footprint(&self, bits: u8, group_size: usize) -> FootprintParams {
        FootprintParams {
            bits,
            head_dim: self.dim(),
            layout: self.layout,
            group_size,
            pattern_set_size: self.use_patterns.then(|| self.patterns.len()),
            token_count: self.committed_tokens(),
        }
    }
}

/// Decode-time cache state of one attention head.
#[derive(Debug, Clone)]
pub struct HeadCacheState {
    config: EngineConfig,
    gate: GateConfig,
    pub k: StreamState,
    pub v: StreamState,
    token_count: usize,
    flushes: usize,
    prefill_pattern_counts: (usize, usize),
}

impl HeadCacheState {
    /// Mine patterns on the full prompt, commit all whole blocks that fall
    /// before the retained full-precision window, and keep the rest.
    ///
    /// The window keeps the last `residual_window` tokens plus whatever
    /// remainder does not fill a complete block.
    pub fn prefill(k: &Matrix, v: &Matrix, config: &EngineConfig) -> Result<Self> {
        config.validate()?;
        if k.rows() == 0 {
            return Err(Error::usage("prefill needs at least one token"));
        }
        if k.rows() != v.rows() || k.cols() != v.cols() {
            return Err(Error::usage(format!(
                "K is {}x{} but V is {}x{}",
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            )));
        }
        if k.cols() == 0 {
            return Err(Error::usage("head dimension must be >= 1"));
        }
        check_finite(k.as_slice())?;
        check_finite(v.as_slice())?;

        let dim = k.cols();
        let gate = GateConfig::new(dim, config.alpha)?;
        let mut state = Self {
            config: config.clone(),
            gate,
            k: StreamState::new(CacheKind::K, dim, config),
            v: StreamState::new(CacheKind::V, dim, config),
            token_count: k.rows(),
            flushes: 0,
            prefill_pattern_counts: (0, 0),
        };

        let k_seed = config.seed;
        let v_seed = config.seed ^ 0x9E37_79B9_7F4A_7C15;
        for (stream, data, seed) in [(&mut state.k, k, k_seed), (&mut state.v, v, v_seed)] {
            if stream.use_patterns {
                stream.patterns = mine_prefill_patterns(data, config.pattern_count, seed)?;
            }
        }
        state.prefill_pattern_counts = (state.k.patterns.len(), state.v.patterns.len());

        let t = k.rows();
        let g = config.group_size;
        let committed = if t > config.residual_window {
            (t - config.residual_window) / g * g
        } else {
            0
        };
        for start in (0..committed).step_by(g) {
            state
                .k
                .commit(&k.slice_rows(start, start + g), config.bits, &gate)?;
            state
                .v
                .commit(&v.slice_rows(start, start + g), config.bits, &gate)?;
        }
        state.k.window = k.slice_rows(committed, t);
        state.v.window = v.slice_rows(committed, t);
        Ok(state)
    }

    /// Add one decoded token. Flushes the oldest `group_size` window tokens
    /// once the window reaches `residual_window + group_size`.
    pub fn append_decode_token(&mut self, k: &[f64], v: &[f64]) -> Result<()> {
        let dim = self.dim();
        if k.len() != dim || v.len() != dim {
            return Err(Error::usage(format!(
                "decode vectors have dimensions {}/{}, head expects {dim}",
                k.len(),
                v.len()
            )));
        }
        check_finite(k)?;
        check_finite(v)?;
        self.k.window.push_row(k)?;
        self.v.window.push_row(v)?;
        self.token_count += 1;

        let g = self.config.group_size;
        if self.k.window.rows() >= self.config.residual_window + g {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let g = self.config.group_size;
        let bits = self.config.bits;
        let generate = self.config.toggles.generate_new_patterns;
        for stream in [&mut self.k, &mut self.v] {
            let rows = stream.window.drain_front(g);
            if generate && stream.use_patterns {
                stream.push_decode_pattern(&rows)?;
            }
            stream.commit(&rows, bits, &self.gate)?;
        }
        self.flushes += 1;
        Ok(())
    }

    /// Reconstruct token `index` of both streams. Window tokens come back
    /// exactly; committed tokens are dequantized and re-aligned.
    pub fn reconstruct_token(&self, index: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if index >= self.token_count {
            return Err(Error::usage(format!(
                "token {index} out of range for {} cached tokens",
                self.token_count
            )));
        }
        let committed = self.committed_tokens();
        if index < committed {
            let g = self.config.group_size;
            Ok((
                self.k.reconstruct_committed(index, g)?,
                self.v.reconstruct_committed(index, g)?,
            ))
        } else {
            let w = index - committed;
            Ok((self.k.window.row(w).to_vec(), self.v.window.row(w).to_vec()))
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn gate_config(&self) -> &GateConfig {
        &self.gate
    }

    pub fn dim(&self) -> usize {
        self.k.dim()
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn committed_tokens(&self) -> usize {
        self.k.committed_tokens()
    }

    pub fn window_tokens(&self) -> usize {
        self.k.window.rows()
    }

    /// Number of decode-time flushes so far.
    pub fn flushes(&self) -> usize {
        self.flushes
    }

    /// Pattern counts (K, V) right after prefill mining.
    pub fn prefill_pattern_counts(&self) -> (usize, usize) {
        self.prefill_pattern_counts
    }

    pub fn stream(&self, kind: CacheKind) -> &StreamState {
        match kind {
            CacheKind::K => &self.k,
            CacheKind::V => &self.v,
        }
    }

    /// Reassemble a state from its stored parts. Token records are not part
    /// of the stored form, so metrics start empty.
    pub(crate) fn from_parts(
        config: EngineConfig,
        mut k: StreamState,
        mut v: StreamState,
        token_count: usize,
        flushes: usize,
        prefill_pattern_counts: (usize, usize),
    ) -> Result<Self> {
        config.validate()?;
        let dim = k.dim();
        if v.dim() != dim || dim == 0 {
            return Err(Error::corrupt("K and V streams disagree on head dimension"));
        }
        let gate = GateConfig::new(dim, config.alpha)?;
        let committed = k.committed_tokens();
        if v.committed_tokens() != committed
            || k.window.rows() != v.window.rows()
            || committed + k.window.rows() != token_count
        {
            return Err(Error::corrupt("token counts in snapshot are inconsistent"));
        }
        for s in [&mut k, &mut v] {
            s.records.clear();
            s.block_records.clear();
        }
        Ok(Self {
            config,
            gate,
            k,
            v,
            token_count,
            flushes,
            prefill_pattern_counts,
        })
    }

    pub(crate) fn new_stream(kind: CacheKind, dim: usize, config: &EngineConfig) -> StreamState {
        StreamState::new(kind, dim, config)
    }
}
