//! Binary cache snapshot (`PKVS`).
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic       4 bytes  "PKVS"
//! version     u32      1
//! config      bits u8, k_layout u8, v_layout u8, toggles u8,
//!             pattern_count u32, group_size u32, residual_window u32,
//!             alpha f64, seed u64
//! head_count  u32
//! per head    layer u32, head u32, head_dim u32, seed u64,
//!             token_count u64, flushes u64,
//!             prefill_k_patterns u32, prefill_v_patterns u32,
//!             K stream, V stream
//! stream      pattern_count u32, { origin u8, head_dim x f64 }*
//!             block_count u32, { block }*
//!             window_rows u32, window_rows x head_dim x f64
//! block       tokens u32,
//!             tokens x u16 pattern index (0xFFFF = stored raw),
//!             tokens x gate { present u8 [, flatten u8, rho f64, r_raw f64, r_flat f64] },
//!             group_count u32, { layout u8, bits u8, scale f64, zero_point f64,
//!                                len u32, byte_len u32, byte_len bytes }*
//! ```
//!
//! Toggle bits: 0 K patterns, 1 V patterns, 2 new patterns, 3 V gate, 4 K gate.
//! Layout tags: 0 per-channel, 1 per-token. Origin tags: 0 prefill, 1 decode.

use super::config::{EngineConfig, Toggles};
use super::state::{CacheKind, CommittedBlock, HeadCacheState, StreamState};
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::gate::GateDecision;
use crate::patterns::{PatternOrigin, PatternSet};
use crate::quant::{GroupLayout, QuantParams, QuantizedGroup};
use crate::tensor::Matrix;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"PKVS";
pub const SNAPSHOT_VERSION: u32 = 1;
const RAW_INDEX: u16 = u16::MAX;

#[derive(Debug, Clone)]
pub struct SnapshotHead {
    pub layer: usize,
    pub head: usize,
    pub state: HeadCacheState,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub config: EngineConfig,
    pub heads: Vec<SnapshotHead>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::usage(format!("{what} {v} does not fit in u32")))
}

fn toggle_bits(t: &Toggles) -> u8 {
    u8::from(t.use_k_patterns)
        | u8::from(t.use_v_patterns) << 1
        | u8::from(t.generate_new_patterns) << 2
        | u8::from(t.use_v_gate) << 3
        | u8::from(t.use_k_gate) << 4
}

fn toggles_from(bits: u8) -> Toggles {
    Toggles {
        use_k_patterns: bits & 1 != 0,
        use_v_patterns: bits & 2 != 0,
        generate_new_patterns: bits & 4 != 0,
        use_v_gate: bits & 8 != 0,
        use_k_gate: bits & 16 != 0,
    }
}

fn write_config(w: &mut ByteWriter, c: &EngineConfig) -> Result<()> {
    w.u8(c.bits);
    w.u8(c.k_layout.tag());
    w.u8(c.v_layout.tag());
    w.u8(toggle_bits(&c.toggles));
    w.u32(to_u32(c.pattern_count, "pattern count")?);
    w.u32(to_u32(c.group_size, "group size")?);
    w.u32(to_u32(c.residual_window, "residual window")?);
    w.f64(c.alpha);
    w.u64(c.seed);
    Ok(())
}

fn write_stream(w: &mut ByteWriter, s: &StreamState) -> Result<()> {
    w.u32(to_u32(s.patterns.len(), "pattern count")?);
    for (i, p) in s.patterns.iter().enumerate() {
        w.u8(s.patterns.origin(i).expect("origin per pattern").tag());
        p.iter().for_each(|&v| w.f64(v));
    }
    w.u32(to_u32(s.blocks.len(), "block count")?);
    for b in &s.blocks {
        w.u32(to_u32(b.tokens, "block tokens")?);
        for idx in &b.pattern_indices {
            w.u16(match idx {
                Some(i) => u16::try_from(*i)
                    .ok()
                    .filter(|&i| i != RAW_INDEX)
                    .ok_or_else(|| Error::usage("pattern index exceeds u16 storage"))?,
                None => RAW_INDEX,
            });
        }
        for g in &b.gates {
            match g {
                None => w.u8(0),
                Some(d) => {
                    w.u8(1);
                    w.u8(u8::from(d.flatten));
                    w.f64(d.rho);
                    w.f64(d.r_raw);
                    w.f64(d.r_flat);
                }
            }
        }
        w.u32(to_u32(b.groups.len(), "group count")?);
        for g in &b.groups {
            w.u8(g.layout.tag());
            w.u8(g.params.bits);
            w.f64(g.params.scale);
            w.f64(g.params.zero_point);
            w.u32(to_u32(g.len, "group length")?);
            w.u32(to_u32(g.codes.len(), "packed length")?);
            w.bytes(&g.codes);
        }
    }
    w.u32(to_u32(s.window.rows(), "window rows")?);
    s.window.as_slice().iter().for_each(|&v| w.f64(v));
    Ok(())
}

/// Serialize the given heads. `config` is the run-level configuration; each
/// head also records its own derived mining seed.
pub fn write_snapshot(config: &EngineConfig, heads: &[SnapshotHead]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(SNAPSHOT_MAGIC);
    w.u32(SNAPSHOT_VERSION);
    write_config(&mut w, config)?;
    w.u32(to_u32(heads.len(), "head count")?);
    for h in heads {
        let s = &h.state;
        w.u32(to_u32(h.layer, "layer")?);
        w.u32(to_u32(h.head, "head")?);
        w.u32(to_u32(s.dim(), "head dim")?);
        w.u64(s.config().seed);
        w.u64(s.token_count() as u64);
        w.u64(s.flushes() as u64);
        let (pk, pv) = s.prefill_pattern_counts();
        w.u32(to_u32(pk, "prefill patterns")?);
        w.u32(to_u32(pv, "prefill patterns")?);
        write_stream(&mut w, &s.k)?;
        write_stream(&mut w, &s.v)?;
    }
    Ok(w.buf)
}

fn read_config(r: &mut ByteReader) -> Result<EngineConfig> {
    let bits = r.u8("bits")?;
    let layout = |r: &mut ByteReader, what| -> Result<GroupLayout> {
        let tag = r.u8(what)?;
        GroupLayout::from_tag(tag).map_or_else(|| r.fail(format!("unknown layout tag {tag}")), Ok)
    };
    let k_layout = layout(r, "K layout")?;
    let v_layout = layout(r, "V layout")?;
    let toggles = toggles_from(r.u8("toggles")?);
    let config = EngineConfig {
        bits,
        k_layout,
        v_layout,
        toggles,
        pattern_count: r.u32("pattern count")? as usize,
        group_size: r.u32("group size")? as usize,
        residual_window: r.u32("residual window")? as usize,
        alpha: r.f64("alpha")?,
        seed: r.u64("seed")?,
    };
    config.validate().map_err(|e| Error::Format {
        offset: r.offset(),
        reason: format!("invalid config block: {e}"),
    })?;
    Ok(config)
}

fn read_stream(
    r: &mut ByteReader,
    kind: CacheKind,
    dim: usize,
    config: &EngineConfig,
) -> Result<StreamState> {
    let mut stream = HeadCacheState::new_stream(kind, dim, config);
    let n_patterns = r.u32("pattern count")? as usize;
    let mut patterns = PatternSet::new(dim, config.pattern_count);
    for _ in 0..n_patterns {
        let tag = r.u8("pattern origin")?;
        let origin = match PatternOrigin::from_tag(tag) {
            Some(o) => o,
            None => return r.fail(format!("unknown pattern origin {tag}")),
        };
        let values = (0..dim)
            .map(|_| r.f64("pattern value"))
            .collect::<Result<Vec<_>>>()?;
        let at = r.offset();
        patterns.push(values, origin).map_err(|e| Error::Format {
            offset: at,
            reason: e.to_string(),
        })?;
    }
    stream.patterns = patterns;

    let n_blocks = r.u32("block count")? as usize;
    for _ in 0..n_blocks {
        let tokens = r.u32("block tokens")? as usize;
        if tokens != config.group_size {
            return r.fail(format!(
                "block holds {tokens} tokens, configured group size is {}",
                config.group_size
            ));
        }
        let mut pattern_indices = Vec::with_capacity(tokens);
        for _ in 0..tokens {
            let idx = r.u16("pattern index")?;
            if idx == RAW_INDEX {
                pattern_indices.push(None);
            } else if (idx as usize) < n_patterns {
                pattern_indices.push(Some(idx as usize));
            } else {
                return r.fail(format!("pattern index {idx} >= pattern count {n_patterns}"));
            }
        }
        let mut gates = Vec::with_capacity(tokens);
        for _ in 0..tokens {
            gates.push(match r.u8("gate flag")? {
                0 => None,
                1 => Some(GateDecision {
                    flatten: r.u8("gate outcome")? != 0,
                    rho: r.f64("rho")?,
                    r_raw: r.f64("r_raw")?,
                    r_flat: r.f64("r_flat")?,
                }),
                other => return r.fail(format!("invalid gate flag {other}")),
            });
        }
        let n_groups = r.u32("group count")? as usize;
        let mut groups = Vec::with_capacity(n_groups.min(r.remaining()));
        for _ in 0..n_groups {
            let tag = r.u8("group layout")?;
            let Some(layout) = GroupLayout::from_tag(tag) else {
                return r.fail(format!("unknown layout tag {tag}"));
            };
            let params = QuantParams {
                bits: r.u8("group bits")?,
                scale: r.f64("scale")?,
                zero_point: r.f64("zero point")?,
            };
            let len = r.u32("group length")? as usize;
            let byte_len = r.u32("packed length")? as usize;
            let codes = r.take(byte_len, "packed codes")?.to_vec();
            let group = QuantizedGroup {
                params,
                codes,
                len,
                layout,
            };
            group.codes().map_err(|e| Error::Format {
                offset: r.offset(),
                reason: e.to_string(),
            })?;
            groups.push(group);
        }
        let expected_groups = match stream.layout {
            GroupLayout::PerChannel => dim,
            GroupLayout::PerToken => tokens,
        };
        if n_groups != expected_groups {
            return r.fail("block geometry does not match the configured layout");
        }
        stream.blocks.push(CommittedBlock {
            tokens,
            pattern_indices,
            gates,
            groups,
        });
    }

    let rows = r.u32("window rows")? as usize;
    let data = (0..rows * dim)
        .map(|_| r.f64("window value"))
        .collect::<Result<Vec<_>>>()?;
    stream.window = Matrix::new(rows, dim, data)?;
    Ok(stream)
}

pub fn read_snapshot(bytes: &[u8]) -> Result<Snapshot> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != SNAPSHOT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "not a cache snapshot (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Version {
            what: "snapshot",
            expected: SNAPSHOT_VERSION,
            found: version,
        });
    }
    let config = read_config(&mut r)?;
    let n_heads = r.u32("head count")? as usize;
    let mut heads = Vec::with_capacity(n_heads.min(r.remaining()));
    for _ in 0..n_heads {
        let layer = r.u32("layer")? as usize;
        let head = r.u32("head")? as usize;
        let dim = r.u32("head dim")? as usize;
        if dim == 0 {
            return r.fail("head dimension is zero");
        }
        let head_config = EngineConfig {
            seed: r.u64("head seed")?,
            ..config.clone()
        };
        let token_count = r.u64("token count")? as usize;
        let flushes = r.u64("flushes")? as usize;
        let pk = r.u32("prefill patterns")? as usize;
        let pv = r.u32("prefill patterns")? as usize;
        let k = read_stream(&mut r, CacheKind::K, dim, &head_config)?;
        let v = read_stream(&mut r, CacheKind::V, dim, &head_config)?;
        let at = r.offset();
        let state =
            HeadCacheState::from_parts(head_config, k, v, token_count, flushes, (pk, pv)).map_err(|e| {
                Error::Format {
                    offset: at,
                    reason: e.to_string(),
                }
            })?;
        heads.push(SnapshotHead { layer, head, state });
    }
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes after last head", r.remaining()));
    }
    Ok(Snapshot { config, heads })
}
