use serde::{Deserialize, Serialize};

use super::{Buffer, BufferId};
use crate::error::{Error, Result};

/// Default block for int8 weight quantization.
pub const WEIGHT_BLOCK: usize = 256;
/// Default block for int4 gradient quantization.
pub const GRAD_BLOCK: usize = 64;

/// Asymmetric blockwise quantization: `v ≈ min_b + code * scale_b`.
///
/// Codes are kept one per `u8` regardless of width; [`QuantizedBuffer::wire_bytes`]
/// reports the packed size that would actually be sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBuffer {
    pub bits: u8,
    pub block: usize,
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub mins: Vec<f32>,
    pub original_len: usize,
}

impl QuantizedBuffer {
    pub fn num_blocks(&self) -> usize {
        self.original_len.div_ceil(self.block)
    }

    pub fn max_code(&self) -> u8 {
        max_code(self.bits)
    }

    /// Packed codes plus one `f32` scale and one `f32` min per block.
    pub fn wire_bytes(&self) -> usize {
        wire_bytes(self.original_len, self.bits, self.block)
    }

    fn validate(&self) -> Result<()> {
        if self.bits != 4 && self.bits != 8 {
            return Err(Error::InvalidArgument(format!("unsupported width {} bits", self.bits)));
        }
        if self.block == 0 {
            return Err(Error::InvalidArgument("block must be >= 1".into()));
        }
        let blocks = self.num_blocks();
        if self.codes.len() != self.original_len || self.scales.len() != blocks || self.mins.len() != blocks {
            return Err(Error::InvalidArgument("malformed quantized buffer".into()));
        }
        if self.codes.iter().any(|&c| c > self.max_code()) {
            return Err(Error::InvalidArgument("code out of range".into()));
        }
        Ok(())
    }
}

/// Size on the wire of `len` elements quantized at `bits` with `block`.
pub fn wire_bytes(len: usize, bits: u8, block: usize) -> usize {
    (len * bits as usize).div_ceil(8) + len.div_ceil(block) * 8
}

fn max_code(bits: u8) -> u8 {
    ((1u16 << bits) - 1) as u8
}

/// Quantizes raw values. Non-finite input is an error, never clamped.
pub fn quantize_values(values: &[f32], bits: u8, block: usize) -> Result<QuantizedBuffer> {
    if bits != 4 && bits != 8 {
        return Err(Error::InvalidArgument(format!("unsupported width {bits} bits")));
    }
    if block == 0 {
        return Err(Error::InvalidArgument("block must be >= 1".into()));
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::QuantizationDomain { index, value });
    }
    let qmax = max_code(bits);
    let blocks = values.len().div_ceil(block);
    let mut codes = Vec::with_capacity(values.len());
    let mut scales = Vec::with_capacity(blocks);
    let mut mins = Vec::with_capacity(blocks);

    for (b, chunk) in values.chunks(block).enumerate() {
        let min = chunk.iter().copied().fold(f32::INFINITY, f32::min);
        let max = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let scale = (max - min) / qmax as f32;
        if !scale.is_finite() {
            let index = b * block;
            return Err(Error::QuantizationDomain { index, value: max - min });
        }
        if scale > 0.0 {
            let (lo, s) = (min as f64, scale as f64);
            codes.extend(chunk.iter().map(|&v| ((v as f64 - lo) / s).round().clamp(0.0, qmax as f64) as u8));
        } else {
            codes.extend(std::iter::repeat_n(0u8, chunk.len()));
        }
        scales.push(scale);
        mins.push(min);
    }
    Ok(QuantizedBuffer { bits, block, codes, scales, mins, original_len: values.len() })
}

pub fn quantize_blockwise(buf: &Buffer, bits: u8, block: usize) -> Result<QuantizedBuffer> {
    if !buf.initialized {
        return Err(Error::UninitializedRead(buf.id));
    }
    quantize_values(&buf.values, bits, block)
}

pub fn dequantize_values(q: &QuantizedBuffer) -> Result<Vec<f32>> {
    q.validate()?;
    let mut out = Vec::with_capacity(q.original_len);
    for (b, codes) in q.codes.chunks(q.block).enumerate() {
        let (lo, s) = (q.mins[b] as f64, q.scales[b] as f64);
        out.extend(codes.iter().map(|&c| (lo + c as f64 * s) as f32));
    }
    Ok(out)
}

pub fn dequantize_blockwise(q: &QuantizedBuffer) -> Result<Buffer> {
    Buffer::from_values(BufferId(0), dequantize_values(q)?)
}
