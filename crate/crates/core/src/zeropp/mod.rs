//! Layer lifecycle of hierarchically partitioned ZeRO-3: primary 1/P shards,
//! full gathers for forward, a per-node secondary 1/P′ copy made after each
//! forward, prefetched backward gathers (stock or event-synchronized),
//! repartition and gradient reduction with optional weight/gradient
//! quantization.

mod collectives;
mod step;

pub use collectives::{gather_payload_bytes, reduce_payload_bytes};
pub use step::{build_step_program, LayerCompute, LayerShardSet, ShardRef, StepProgram, StructuralCompute};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Buffer, BufferId};
use crate::topology::{ClusterTopology, CollectiveGroup, DeviceRank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HpzMode {
    /// Plain ZeRO-3: backward gathers primary shards over the whole world.
    Off,
    /// Secondary copy, backward gathers launched without waiting for it.
    Stock,
    /// Secondary copy, backward gathers wait for the copy's event.
    Fixed,
}

impl HpzMode {
    pub fn uses_secondary(self) -> bool {
        self != HpzMode::Off
    }
}

impl std::str::FromStr for HpzMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "off" => Ok(HpzMode::Off),
            "stock" => Ok(HpzMode::Stock),
            "fixed" => Ok(HpzMode::Fixed),
            other => Err(Error::config("hpz", format!("expected off|stock|fixed, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scheme {
    pub hpz: HpzMode,
    pub qwz: bool,
    pub qgz: bool,
    pub prefetch_depth: usize,
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme { hpz: HpzMode::Off, qwz: false, qgz: false, prefetch_depth: 1 }
    }
}

impl Scheme {
    pub fn new(hpz: HpzMode) -> Self {
        Scheme { hpz, ..Default::default() }
    }
}

/// All ranks must agree on the scheme; returns it.
pub fn uniform_scheme(per_rank: &[Scheme]) -> Result<Scheme> {
    let first = *per_rank.first().ok_or_else(|| Error::InvalidProgram("no ranks".into()))?;
    if let Some(r) = per_rank.iter().position(|s| *s != first) {
        return Err(Error::InvalidProgram(format!("rank {r} runs {:?}, rank 0 runs {first:?}", per_rank[r])));
    }
    Ok(first)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerDesc {
    /// Weight matrix plus bias.
    pub fn elems(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerDesc>,
    /// P
    pub world_size: usize,
    /// P′
    pub secondary_world_size: usize,
}

impl ModelSpec {
    /// Dense stack `dims[0] -> dims[1] -> ...` on `topo`, with P′ = devices per node.
    pub fn from_dims(dims: &[usize], topo: &ClusterTopology) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config("dims", "need at least two positive dimensions"));
        }
        let layers = dims.windows(2).map(|w| LayerDesc { in_dim: w[0], out_dim: w[1] }).collect();
        let spec = ModelSpec { layers, world_size: topo.world_size(), secondary_world_size: topo.devices_per_node };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        if self.secondary_world_size == 0 || !self.world_size.is_multiple_of(self.secondary_world_size) {
            return Err(Error::InvalidArgument(format!(
                "secondary world size {} must divide world size {}",
                self.secondary_world_size, self.world_size
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn elems(&self, layer: usize) -> usize {
        self.layers[layer].elems()
    }

    pub fn primary_len(&self, layer: usize) -> usize {
        shard_len(self.elems(layer), self.world_size)
    }

    /// `ceil(N / P′)`
    pub fn secondary_len(&self, layer: usize) -> usize {
        shard_len(self.elems(layer), self.secondary_world_size)
    }

    /// The P′ group of `rank`: `P′` consecutive ranks.
    pub fn secondary_group(&self, rank: DeviceRank, topo: &ClusterTopology) -> CollectiveGroup {
        let first = rank.global / self.secondary_world_size * self.secondary_world_size;
        let ranks = (first..first + self.secondary_world_size).map(|g| topo.rank(g).expect("in world")).collect();
        CollectiveGroup::new(ranks).expect("valid group")
    }
}

pub fn shard_len(n: usize, parts: usize) -> usize {
    n.div_ceil(parts)
}

/// Contiguous `ceil(n/parts)` slice `index`, zero-padded past the end.
pub fn partition(values: &[f32], parts: usize, index: usize) -> Vec<f32> {
    let len = shard_len(values.len(), parts);
    let start = (index * len).min(values.len());
    let end = (start + len).min(values.len());
    let mut shard = values[start..end].to_vec();
    shard.resize(len, 0.0);
    shard
}

/// Concatenates shards in order and drops padding beyond `n`.
pub fn reconstruct(shards: &[Vec<f32>], n: usize) -> Vec<f32> {
    let mut full: Vec<f32> = shards.iter().flatten().copied().collect();
    full.truncate(n);
    full
}

/// This rank's 1/P slice of an initialized weight buffer.
pub fn partition_primary(weights: &Buffer, world_size: usize, rank: DeviceRank) -> Result<Buffer> {
    if !weights.initialized {
        return Err(Error::UninitializedRead(weights.id));
    }
    if rank.global >= world_size {
        return Err(Error::InvalidArgument(format!("rank {} outside world {world_size}", rank.global)));
    }
    Buffer::from_values(BufferId(0), partition(&weights.values, world_size, rank.global))
}
