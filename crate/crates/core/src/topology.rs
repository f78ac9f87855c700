//! Virtual cluster description and the flat-ring cost model.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodes of identical devices. Intra-node links are per device; the
/// inter-node bandwidth is one NIC per node shared by every local rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterTopology {
    pub nodes: usize,
    pub devices_per_node: usize,
    /// bytes/s
    pub intra_bw: f64,
    /// bytes/s, per node NIC
    pub inter_bw: f64,
    /// seconds per ring hop
    pub intra_latency: f64,
    pub inter_latency: f64,
}

impl Default for ClusterTopology {
    fn default() -> Self {
        ClusterTopology {
            nodes: 2,
            devices_per_node: 8,
            intra_bw: 600e9,
            inter_bw: 12.5e9 / 8.0,
            intra_latency: 5e-6,
            inter_latency: 2e-5,
        }
    }
}

impl ClusterTopology {
    pub fn new(nodes: usize, devices_per_node: usize) -> Self {
        ClusterTopology { nodes, devices_per_node, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::config("nodes", "must be >= 1"));
        }
        if self.devices_per_node == 0 {
            return Err(Error::config("devices_per_node", "must be >= 1"));
        }
        for (key, bw) in [("intra_bw", self.intra_bw), ("inter_bw", self.inter_bw)] {
            if !(bw > 0.0 && bw.is_finite()) {
                return Err(Error::config(key, "must be a positive finite bandwidth"));
            }
        }
        for (key, lat) in [("intra_latency", self.intra_latency), ("inter_latency", self.inter_latency)] {
            if !(lat >= 0.0 && lat.is_finite()) {
                return Err(Error::config(key, "must be >= 0"));
            }
        }
        Ok(())
    }

    /// P
    pub fn world_size(&self) -> usize {
        self.nodes * self.devices_per_node
    }

    pub fn rank(&self, global: usize) -> Result<DeviceRank> {
        if global >= self.world_size() {
            return Err(Error::InvalidArgument(format!(
                "rank {global} outside world of {}",
                self.world_size()
            )));
        }
        Ok(DeviceRank {
            global,
            node: global / self.devices_per_node,
            local: global % self.devices_per_node,
        })
    }

    pub fn ranks(&self) -> impl Iterator<Item = DeviceRank> + '_ {
        (0..self.world_size()).map(|g| self.rank(g).expect("in range"))
    }

    /// Inter-node bandwidth seen by one rank when all local ranks share the NIC.
    pub fn inter_bw_effective(&self) -> f64 {
        self.inter_bw / self.devices_per_node as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceRank {
    pub global: usize,
    pub node: usize,
    pub local: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CollectiveGroup {
    ranks: Vec<DeviceRank>,
    spans_nodes: bool,
}

impl CollectiveGroup {
    pub fn new(ranks: Vec<DeviceRank>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidArgument("collective group must be non-empty".into()));
        }
        let distinct: BTreeSet<_> = ranks.iter().map(|r| r.global).collect();
        if distinct.len() != ranks.len() {
            return Err(Error::InvalidArgument("collective group ranks must be distinct".into()));
        }
        let nodes: BTreeSet<_> = ranks.iter().map(|r| r.node).collect();
        Ok(CollectiveGroup { spans_nodes: nodes.len() >= 2, ranks })
    }

    pub fn ranks(&self) -> &[DeviceRank] {
        &self.ranks
    }

    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    pub fn spans_nodes(&self) -> bool {
        self.spans_nodes
    }

    /// Position of `rank` within the group, if it is a member.
    pub fn index_of(&self, rank: DeviceRank) -> Option<usize> {
        self.ranks.iter().position(|r| r.global == rank.global)
    }
}

/// The P group: every rank in the cluster.
pub fn world_group(topo: &ClusterTopology) -> CollectiveGroup {
    CollectiveGroup::new(topo.ranks().collect()).expect("world is non-empty")
}

/// The P′ group of `rank`: every device on its node.
pub fn secondary_group(rank: DeviceRank, topo: &ClusterTopology) -> CollectiveGroup {
    let first = rank.node * topo.devices_per_node;
    let ranks = (first..first + topo.devices_per_node)
        .map(|g| topo.rank(g).expect("node member in range"))
        .collect();
    CollectiveGroup::new(ranks).expect("node group is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollectiveKind {
    AllGather,
    ReduceScatter,
    AllToAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub topology: ClusterTopology,
    /// Simulated seconds for one layer's forward or backward on one device.
    pub compute_time_per_layer_pass: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { topology: ClusterTopology::default(), compute_time_per_layer_pass: 5e-5 }
    }
}

impl CostModel {
    pub fn new(topology: ClusterTopology, compute_time_per_layer_pass: f64) -> Result<Self> {
        topology.validate()?;
        if !(compute_time_per_layer_pass >= 0.0 && compute_time_per_layer_pass.is_finite()) {
            return Err(Error::config("compute_time_per_layer_pass", "must be >= 0"));
        }
        Ok(CostModel { topology, compute_time_per_layer_pass })
    }

    pub fn bytes_per_element(bits: u32) -> f64 {
        bits as f64 / 8.0
    }

    /// Flat ring: `(g-1)·λ + (g-1)/g · g·payload / B`. `payload_bytes_per_rank`
    /// is the chunk each rank contributes (AllGather), owns after reduction
    /// (ReduceScatter) or sends to each peer (AllToAll).
    pub fn collective_time(&self, _kind: CollectiveKind, group: &CollectiveGroup, payload_bytes_per_rank: f64) -> f64 {
        let g = group.size();
        if g <= 1 {
            return 0.0;
        }
        let topo = &self.topology;
        let (latency, bw) = if group.spans_nodes() {
            (topo.inter_latency, topo.inter_bw_effective())
        } else {
            (topo.intra_latency, topo.intra_bw)
        };
        let g = g as f64;
        let total = g * payload_bytes_per_rank;
        (g - 1.0) * latency + (g - 1.0) / g * total / bw
    }

    pub fn memcpy_time(&self, bytes: f64) -> f64 {
        bytes / self.topology.intra_bw
    }
}

/// Bytes crossing links for one ring collective: every rank sends `g-1` chunks.
pub fn wire_bytes(group: &CollectiveGroup, payload_bytes_per_rank: f64) -> f64 {
    let g = group.size() as f64;
    g * (g - 1.0) * payload_bytes_per_rank
}
