use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::{OpId, Program};
use crate::numerics::{BufferId, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HazardKind {
    /// A read that may observe the region before or after a write commits.
    ReadBeforeWriteCommit,
    /// Two writes whose commit order is undefined. `reader` holds the second writer.
    WriteWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Hazard {
    pub writer: OpId,
    pub reader: OpId,
    pub region: Region,
    pub kind: HazardKind,
}

/// Conflicting accesses on different stream ops that no happens-before path
/// (stream order, event edges, host syncs, collective rendezvous) orders.
/// Purely static: no schedule is executed.
pub fn detect_hazards(program: &Program) -> Vec<Hazard> {
    let graph = Graph::build(program);
    let anc = graph.ancestors();
    let ordered = |a: usize, b: usize| anc[b].contains(a) || anc[a].contains(b);

    struct Access {
        op: OpId,
        node: usize,
        region: Region,
        write: bool,
    }
    let mut by_buffer: BTreeMap<BufferId, Vec<Access>> = BTreeMap::new();
    for op in program.ops() {
        let node = graph.node_of[op.id.0];
        for &region in &op.reads {
            by_buffer.entry(region.buffer).or_default().push(Access { op: op.id, node, region, write: false });
        }
        for &region in &op.writes {
            by_buffer.entry(region.buffer).or_default().push(Access { op: op.id, node, region, write: true });
        }
    }

    let mut out = Vec::new();
    for accesses in by_buffer.values() {
        for (i, a) in accesses.iter().enumerate() {
            for b in &accesses[i + 1..] {
                if a.node == b.node || !(a.write || b.write) {
                    continue;
                }
                let Some(region) = a.region.overlap(&b.region) else { continue };
                if ordered(a.node, b.node) {
                    continue;
                }
                let hazard = match (a.write, b.write) {
                    (true, false) => Hazard { writer: a.op, reader: b.op, region, kind: HazardKind::ReadBeforeWriteCommit },
                    (false, true) => Hazard { writer: b.op, reader: a.op, region, kind: HazardKind::ReadBeforeWriteCommit },
                    _ => {
                        let (w, r) = if a.op <= b.op { (a.op, b.op) } else { (b.op, a.op) };
                        Hazard { writer: w, reader: r, region, kind: HazardKind::WriteWrite }
                    }
                };
                out.push(hazard);
            }
        }
    }
    out.sort();
    out.dedup();
    out
}
