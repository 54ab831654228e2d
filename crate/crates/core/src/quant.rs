//! Asymmetric n-bit min-max group quantization and code packing.
//!
//! A group of values is mapped onto `2^n` evenly spaced levels spanning
//! `[min, max]`:
//!
//! ```text
//! s = (max - min) / (2^n - 1)      z = min
//! q = clamp(round((x - z) / s), 0, 2^n - 1)
//! x' = s * q + z
//! ```
//!
//! Rounding is half away from zero. A group with `max == min` gets `s = 0`
//! and all-zero codes, and dequantizes back to `z` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::tensor::min_max;

/// Bit widths supported by the quantizer.
pub const SUPPORTED_BITS: [u8; 3] = [2, 4, 8];

pub fn validate_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::usage(format!(
            "unsupported bit width {bits}; expected one of 2, 4, 8"
        )))
    }
}

/// Largest code representable with `bits` bits.
#[inline]
pub fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Which axis a group was formed along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupLayout {
    /// One channel across a block of consecutive tokens (K cache).
    PerChannel,
    /// All channels of a single token (V cache).
    PerToken,
}

impl GroupLayout {
    pub fn tag(self) -> u8 {
        match self {
            GroupLayout::PerChannel => 0,
            GroupLayout::PerToken => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(GroupLayout::PerChannel),
            1 => Some(GroupLayout::PerToken),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: f64,
    pub bits: u8,
}

impl QuantParams {
    /// Min-max parameters for a finite, non-empty group.
    pub fn fit(values: &[f64], bits: u8) -> Result<Self> {
        validate_bits(bits)?;
        if values.is_empty() {
            return Err(Error::usage("cannot quantize an empty group"));
        }
        check_finite(values)?;
        let (lo, hi) = min_max(values).expect("non-empty");
        let scale = if hi > lo {
            (hi - lo) / f64::from(max_code(bits))
        } else {
            0.0
        };
        Ok(Self {
            scale,
            zero_point: lo,
            bits,
        })
    }

    #[inline]
    pub fn encode(&self, value: f64) -> u32 {
        if self.scale == 0.0 {
            return 0;
        }
        let q = ((value - self.zero_point) / self.scale).round();
        q.clamp(0.0, f64::from(max_code(self.bits))) as u32
    }

    #[inline]
    pub fn decode(&self, code: u32) -> f64 {
        self.scale * f64::from(code) + self.zero_point
    }
}

/// Packed codes for one quantization group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    pub params: QuantParams,
    pub codes: Vec<u8>,
    pub len: usize,
    pub layout: GroupLayout,
}

impl QuantizedGroup {
    /// Unpacked codes.
    pub fn codes(&self) -> Result<Vec<u32>> {
        self.check_packing()?;
        unpack_codes(&self.codes, self.len, self.params.bits)
    }

    /// Code of element `i` without unpacking the whole group.
    pub fn code_at(&self, i: usize) -> Result<u32> {
        self.check_packing()?;
        if i >= self.len {
            return Err(Error::usage(format!(
                "element {i} out of range for group of {}",
                self.len
            )));
        }
        let bits = self.params.bits as usize;
        let per_byte = 8 / bits;
        let shift = (i % per_byte) * bits;
        Ok(u32::from(
            (self.codes[i / per_byte] >> shift) & max_code(self.params.bits) as u8,
        ))
    }

    fn check_packing(&self) -> Result<()> {
        validate_bits(self.params.bits)
            .map_err(|_| Error::corrupt(format!("group carries bit width {}", self.params.bits)))?;
        let expected = packed_len(self.len, self.params.bits);
        if self.codes.len() != expected {
            return Err(Error::corrupt(format!(
                "packed code buffer is {} bytes, expected {expected} for {} codes at {} bits",
                self.codes.len(),
                self.len,
                self.params.bits
            )));
        }
        if self.params.scale.is_nan() || self.params.scale < 0.0 || !self.params.zero_point.is_finite() {
            return Err(Error::corrupt("group has invalid scale or zero point"));
        }
        Ok(())
    }
}

/// Quantize one group of values.
pub fn quantize_group(values: &[f64], bits: u8, layout: GroupLayout) -> Result<QuantizedGroup> {
    let params = QuantParams::fit(values, bits)?;
    let codes: Vec<u32> = values.iter().map(|&v| params.encode(v)).collect();
    Ok(QuantizedGroup {
        params,
        codes: pack_codes(&codes, bits)?,
        len: values.len(),
        layout,
    })
}

pub fn dequantize_group(group: &QuantizedGroup) -> Result<Vec<f64>> {
    Ok(group
        .codes()?
        .into_iter()
        .map(|c| group.params.decode(c))
        .collect())
}

/// Bytes needed to hold `len` codes of `bits` bits each.
pub fn packed_len(len: usize, bits: u8) -> usize {
    (len * bits as usize).div_ceil(8)
}

/// Pack codes LSB-first: code `i` occupies bits `[i*n, (i+1)*n)` of the
/// little-endian bit stream.
pub fn pack_codes(codes: &[u32], bits: u8) -> Result<Vec<u8>> {
    validate_bits(bits)?;
    let limit = max_code(bits);
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let per_byte = 8 / bits as usize;
    for (i, &code) in codes.iter().enumerate() {
        if code > limit {
            return Err(Error::usage(format!(
                "code {code} at index {i} does not fit in {bits} bits"
            )));
        }
        let shift = (i % per_byte) * bits as usize;
        out[i / per_byte] |= (code as u8) << shift;
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], len: usize, bits: u8) -> Result<Vec<u32>> {
    validate_bits(bits)?;
    if bytes.len() != packed_len(len, bits) {
        return Err(Error::corrupt(format!(
            "{} packed bytes cannot hold exactly {len} codes at {bits} bits",
            bytes.len()
        )));
    }
    let per_byte = 8 / bits as usize;
    let mask = max_code(bits) as u8;
    Ok((0..len)
        .map(|i| {
            let shift = (i % per_byte) * bits as usize;
            u32::from((bytes[i / per_byte] >> shift) & mask)
        })
        .collect())
}
