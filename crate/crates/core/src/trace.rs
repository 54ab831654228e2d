//! `KVTR` trace files: recorded prefill and decode K/V tensors.
//!
//! Header (29 bytes, little-endian):
//!
//! ```text
//! magic "KVTR" | version u32 | num_layers u32 | num_kv_heads u32 |
//! head_dim u32 | dtype u8 (1 = f16, 2 = f32) | prefill_len u32 | decode_steps u32
//! ```
//!
//! Body: for each layer, prefill K then prefill V, each laid out
//! `[heads x prefill_len x head_dim]` row-major; then for each decode step,
//! for each layer, K then V as `[heads x 1 x head_dim]`. Values are widened
//! to f64 on load.

use half::f16;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::stream::{HeadStream, KvStream};
use crate::tensor::Matrix;

pub const TRACE_MAGIC: &[u8; 4] = b"KVTR";
pub const TRACE_VERSION: u32 = 1;
pub const TRACE_HEADER_LEN: usize = 29;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceDtype {
    F16,
    F32,
}

impl TraceDtype {
    pub fn code(self) -> u8 {
        match self {
            TraceDtype::F16 => 1,
            TraceDtype::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(TraceDtype::F16),
            2 => Some(TraceDtype::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            TraceDtype::F16 => 2,
            TraceDtype::F32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TraceDtype::F16 => "f16",
            TraceDtype::F32 => "f32",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: u32,
    pub num_layers: u32,
    pub num_kv_heads: u32,
    pub head_dim: u32,
    pub dtype: TraceDtype,
    pub prefill_len: u32,
    pub decode_steps: u32,
}

impl TraceHeader {
    /// Exact body length in bytes implied by the header.
    pub fn body_len(&self) -> u64 {
        2 * u64::from(self.num_layers)
            * u64::from(self.num_kv_heads)
            * u64::from(self.head_dim)
            * (u64::from(self.prefill_len) + u64::from(self.decode_steps))
            * self.dtype.size() as u64
    }

    pub fn file_len(&self) -> u64 {
        TRACE_HEADER_LEN as u64 + self.body_len()
    }
}

pub fn read_header(bytes: &[u8]) -> Result<TraceHeader> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != TRACE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "not a KV trace (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != TRACE_VERSION {
        return Err(Error::Version {
            what: "trace",
            expected: TRACE_VERSION,
            found: version,
        });
    }
    let num_layers = r.u32("num_layers")?;
    let num_kv_heads = r.u32("num_kv_heads")?;
    let head_dim = r.u32("head_dim")?;
    let code = r.u8("dtype")?;
    let Some(dtype) = TraceDtype::from_code(code) else {
        return Err(Error::Format {
            offset: 20,
            reason: format!("unknown dtype code {code}"),
        });
    };
    let header = TraceHeader {
        version,
        num_layers,
        num_kv_heads,
        head_dim,
        dtype,
        prefill_len: r.u32("prefill_len")?,
        decode_steps: r.u32("decode_steps")?,
    };
    for (name, v, at) in [
        ("num_layers", num_layers, 8),
        ("num_kv_heads", num_kv_heads, 12),
        ("head_dim", head_dim, 16),
    ] {
        if v == 0 {
            return Err(Error::Format {
                offset: at,
                reason: format!("{name} is zero"),
            });
        }
    }
    if header.prefill_len == 0 {
        return Err(Error::Format {
            offset: 21,
            reason: "prefill_len is zero".into(),
        });
    }
    Ok(header)
}

/// Parse a complete trace. The body length is checked against the header
/// before any value is read.
pub fn read_trace(bytes: &[u8]) -> Result<(TraceHeader, KvStream)> {
    let header = read_header(bytes)?;
    let expected = header.file_len();
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Format {
            offset: actual,
            reason: format!("truncated trace: header implies {expected} bytes, file has {actual}"),
        });
    }
    if actual > expected {
        return Err(Error::Format {
            offset: expected,
            reason: format!("{} trailing bytes after the declared body", actual - expected),
        });
    }

    let layers = header.num_layers as usize;
    let heads = header.num_kv_heads as usize;
    let d = header.head_dim as usize;
    let prefill = header.prefill_len as usize;
    let steps = header.decode_steps as usize;
    let total = prefill + steps;

    let mut r = ByteReader::new(&bytes[TRACE_HEADER_LEN..]);
    let read_value = |r: &mut ByteReader| -> Result<f64> {
        let at = TRACE_HEADER_LEN as u64 + r.offset();
        let v = match header.dtype {
            TraceDtype::F16 => f16::from_bits(r.u16("value")?).to_f64(),
            TraceDtype::F32 => f64::from(f32::from_bits(r.u32("value")?)),
        };
        if !v.is_finite() {
            return Err(Error::Format {
                offset: at,
                reason: format!("non-finite value {v}"),
            });
        }
        Ok(v)
    };

    let mut ks: Vec<Matrix> = (0..layers * heads).map(|_| Matrix::zeros(total, d)).collect();
    let mut vs = ks.clone();
    for layer in 0..layers {
        for target in [&mut ks, &mut vs] {
            for h in 0..heads {
                let m = &mut target[layer * heads + h];
                for t in 0..prefill {
                    for x in m.row_mut(t) {
                        *x = read_value(&mut r)?;
                    }
                }
            }
        }
    }
    for step in 0..steps {
        for layer in 0..layers {
            for target in [&mut ks, &mut vs] {
                for h in 0..heads {
                    for x in target[layer * heads + h].row_mut(prefill + step) {
                        *x = read_value(&mut r)?;
                    }
                }
            }
        }
    }

    let head_streams = ks
        .into_iter()
        .zip(vs)
        .enumerate()
        .map(|(i, (k, v))| HeadStream {
            layer: i / heads,
            head: i % heads,
            k,
            v,
        })
        .collect();
    let stream = KvStream {
        num_layers: layers,
        num_heads: heads,
        head_dim: d,
        prefill_len: prefill,
        decode_len: steps,
        heads: head_streams,
        token_ids: None,
    };
    Ok((header, stream))
}

/// Encode a stream as a trace. Values are narrowed to `dtype`.
pub fn write_trace(stream: &KvStream, dtype: TraceDtype) -> Result<Vec<u8>> {
    stream.validate()?;
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::usage(format!("{what} {v} does not fit in u32")))
    };
    let header = TraceHeader {
        version: TRACE_VERSION,
        num_layers: u32_of(stream.num_layers, "num_layers")?,
        num_kv_heads: u32_of(stream.num_heads, "num_kv_heads")?,
        head_dim: u32_of(stream.head_dim, "head_dim")?,
        dtype,
        prefill_len: u32_of(stream.prefill_len, "prefill_len")?,
        decode_steps: u32_of(stream.decode_len, "decode_steps")?,
    };
    let mut w = ByteWriter::default();
    w.buf.reserve(header.file_len() as usize);
    w.bytes(TRACE_MAGIC);
    w.u32(header.version);
    w.u32(header.num_layers);
    w.u32(header.num_kv_heads);
    w.u32(header.head_dim);
    w.u8(dtype.code());
    w.u32(header.prefill_len);
    w.u32(header.decode_steps);

    let put = |w: &mut ByteWriter, v: f64| match dtype {
        TraceDtype::F16 => w.u16(f16::from_f64(v).to_bits()),
        TraceDtype::F32 => w.u32((v as f32).to_bits()),
    };
    let heads = stream.num_heads;
    for layer in 0..stream.num_layers {
        for kind in 0..2 {
            for h in 0..heads {
                let hs = &stream.heads[layer * heads + h];
                let m = if kind == 0 { &hs.k } else { &hs.v };
                for t in 0..stream.prefill_len {
                    m.row(t).iter().for_each(|&v| put(&mut w, v));
                }
            }
        }
    }
    for step in 0..stream.decode_len {
        let t = stream.prefill_len + step;
        for layer in 0..stream.num_layers {
            for kind in 0..2 {
                for h in 0..heads {
                    let hs = &stream.heads[layer * heads + h];
                    let m = if kind == 0 { &hs.k } else { &hs.v };
                    m.row(t).iter().for_each(|&v| put(&mut w, v));
                }
            }
        }
    }
    debug_assert_eq!(w.buf.len() as u64, header.file_len());
    Ok(w.buf)
}
