//! Flat `f32` buffers with explicit allocation garbage, and the blockwise
//! quantizers used for quantized weight gathers and gradient exchange.
//!
//! A freshly allocated buffer is never zeroed: it holds a garbage pattern that
//! stays observable until something overwrites it. That is what lets a read
//! racing ahead of its producing copy show up as NaN (or as silent noise).

mod quant;

pub use quant::{
    dequantize_blockwise, dequantize_values, quantize_blockwise, quantize_values, wire_bytes as quant_wire_bytes,
    QuantizedBuffer, GRAD_BLOCK, WEIGHT_BLOCK,
};

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BufferId(pub usize);

impl fmt::Display for BufferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "buf#{}", self.0)
    }
}

/// What an uninitialized allocation contains.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum GarbagePattern {
    /// Every element is a quiet NaN.
    #[default]
    NanFill,
    /// Deterministic uniform noise in `[-magnitude, magnitude]`.
    SeededNoise { magnitude: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub id: BufferId,
    pub values: Vec<f32>,
    /// Set once a single write has covered the whole buffer.
    pub initialized: bool,
    pub label: String,
}

impl Buffer {
    /// Allocates `len` elements holding `pattern`. The noise stream is a pure
    /// function of `(seed, id)`.
    pub fn uninitialized(id: BufferId, len: usize, pattern: GarbagePattern, seed: u64) -> Result<Buffer> {
        if len == 0 {
            return Err(Error::InvalidArgument("buffer length must be > 0".into()));
        }
        let values = match pattern {
            GarbagePattern::NanFill => vec![f32::NAN; len],
            GarbagePattern::SeededNoise { magnitude } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, id.0 as u64));
                (0..len).map(|_| rng.gen_range(-1.0f32..=1.0) * magnitude).collect()
            }
        };
        Ok(Buffer { id, values, initialized: false, label: String::new() })
    }

    pub fn from_values(id: BufferId, values: Vec<f32>) -> Result<Buffer> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("buffer length must be > 0".into()));
        }
        Ok(Buffer { id, values, initialized: true, label: String::new() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn whole(&self) -> Region {
        Region { buffer: self.id, offset: 0, len: self.len() }
    }
}

/// `alloc_uninitialized` for a standalone buffer (id 0). Inside a simulation use
/// [`Memory::alloc_uninitialized`], which hands out unique ids.
pub fn alloc_uninitialized(len: usize, pattern: GarbagePattern, seed: u64) -> Result<Buffer> {
    Buffer::uninitialized(BufferId(0), len, pattern, seed)
}

pub fn has_nonfinite(values: &[f32]) -> bool {
    values.iter().any(|v| !v.is_finite())
}

fn mix_seed(seed: u64, id: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A contiguous element range of one buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Region {
    pub buffer: BufferId,
    pub offset: usize,
    pub len: usize,
}

impl Region {
    pub fn new(buffer: BufferId, offset: usize, len: usize) -> Region {
        Region { buffer, offset, len }
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn overlap(&self, other: &Region) -> Option<Region> {
        if self.buffer != other.buffer {
            return None;
        }
        let start = self.offset.max(other.offset);
        let end = (self.offset + self.len).min(other.offset + other.len);
        (start < end).then(|| Region::new(self.buffer, start, end - start))
    }
}

/// All buffers of one simulation, indexed by id.
#[derive(Debug, Clone, Default)]
pub struct Memory {
    buffers: Vec<Buffer>,
    seed: u64,
    pattern: GarbagePattern,
}

impl Memory {
    pub fn new(pattern: GarbagePattern, seed: u64) -> Memory {
        Memory { buffers: Vec::new(), seed, pattern }
    }

    pub fn pattern(&self) -> GarbagePattern {
        self.pattern
    }

    pub fn alloc_uninitialized(&mut self, len: usize, label: impl Into<String>) -> Result<BufferId> {
        let id = BufferId(self.buffers.len());
        let mut buf = Buffer::uninitialized(id, len, self.pattern, self.seed)?;
        buf.label = label.into();
        self.buffers.push(buf);
        Ok(id)
    }

    pub fn alloc_with(&mut self, values: Vec<f32>, label: impl Into<String>) -> Result<BufferId> {
        let id = BufferId(self.buffers.len());
        let mut buf = Buffer::from_values(id, values)?;
        buf.label = label.into();
        self.buffers.push(buf);
        Ok(id)
    }

    pub fn alloc_zeroed(&mut self, len: usize, label: impl Into<String>) -> Result<BufferId> {
        self.alloc_with(vec![0.0; len], label)
    }

    pub fn get(&self, id: BufferId) -> Option<&Buffer> {
        self.buffers.get(id.0)
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn contains(&self, region: &Region) -> bool {
        self.get(region.buffer).is_some_and(|b| region.offset + region.len <= b.len())
    }

    pub fn whole(&self, id: BufferId) -> Region {
        self.buffer(id).whole()
    }

    /// Raw read; no initialization check (hardware does not know either).
    pub fn read(&self, region: Region) -> &[f32] {
        &self.buffers[region.buffer.0].values[region.range()]
    }

    pub fn write(&mut self, region: Region, values: &[f32]) {
        assert_eq!(region.len, values.len(), "write length mismatch on {}", region.buffer);
        let buf = &mut self.buffers[region.buffer.0];
        buf.values[region.range()].copy_from_slice(values);
        if region.offset == 0 && region.len == buf.values.len() {
            buf.initialized = true;
        }
    }

    pub fn values(&self, id: BufferId) -> &[f32] {
        &self.buffers[id.0].values
    }
}
