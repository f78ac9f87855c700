use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::hazards::{detect_hazards, HazardKind};
use super::trace::{LinkBytes, Trace, TraceEntry};
use super::{OpId, OpKind, OpRole, Program};
use crate::error::{Error, Result};
use crate::numerics::Region;
use crate::topology::{wire_bytes, CostModel};

/// How the interpreter linearizes ops that are legally concurrent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// Earliest-enqueued eligible op first.
    ProgramOrder,
    /// Racing readers go before the writers they race with; writers with a
    /// pending racing reader are held back while anything else can run.
    Adversarial,
    /// Uniform choice among eligible ops from a seeded PRNG.
    RandomSeeded(u64),
}

/// Interprets `program`.
///
/// Value effects are applied atomically in dispatch order. Timing is derived
/// from that order: an op starts once its stream predecessor, its event or
/// sync predecessors, every other collective participant's predecessors, and
/// every earlier-dispatched op touching the same elements (with at least one
/// write) have finished. Durations come from `cost`.
pub fn run(program: &Program, policy: SchedulePolicy, cost: &CostModel) -> Result<Trace> {
    let graph = Graph::build(program);
    let n = graph.len();
    let mut memory = program.memory().clone();

    let durations: Vec<f64> = graph.nodes.iter().map(|m| node_duration(program, m[0], cost)).collect();

    let (mut racing_writers, mut racing_readers) = (vec![Vec::new(); n], vec![Vec::new(); n]);
    if policy == SchedulePolicy::Adversarial {
        for h in detect_hazards(program) {
            if h.kind != HazardKind::ReadBeforeWriteCommit {
                continue;
            }
            let (w, r) = (graph.node_of[h.writer.0], graph.node_of[h.reader.0]);
            racing_writers[r].push(w);
            racing_readers[w].push(r);
        }
    }
    let mut rng = match policy {
        SchedulePolicy::RandomSeeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };

    let mut pending: Vec<usize> = graph.preds.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| pending[i] == 0 && !graph.unsatisfiable[i]).collect();
    let mut done = vec![false; n];
    let mut ends = vec![0.0f64; n];
    let mut access_log: Vec<Vec<(Region, bool, f64)>> = vec![Vec::new(); memory.buffers().len()];
    let mut entries = Vec::with_capacity(program.ops().len());
    let mut volume = LinkBytes::default();
    let mut volume_by_role: BTreeMap<OpRole, LinkBytes> = BTreeMap::new();

    while !ready.is_empty() {
        let node = match policy {
            SchedulePolicy::ProgramOrder => *ready.first().expect("non-empty"),
            SchedulePolicy::RandomSeeded(_) => {
                let idx = rng.as_mut().expect("seeded").gen_range(0..ready.len());
                *ready.iter().nth(idx).expect("in range")
            }
            SchedulePolicy::Adversarial => {
                let score = |i: usize| {
                    if racing_writers[i].iter().any(|&w| !done[w]) {
                        2
                    } else if racing_readers[i].iter().any(|&r| !done[r]) {
                        0
                    } else {
                        1
                    }
                };
                // max score, ties to the earliest node
                *ready.iter().rev().max_by_key(|&&i| score(i)).expect("non-empty")
            }
        };
        ready.remove(&node);

        let members = &graph.nodes[node];
        let mut start = graph.preds[node].iter().map(|&p| ends[p]).fold(0.0, f64::max);
        for &m in members {
            let op = program.op(m);
            for (regions, write) in [(&op.reads, false), (&op.writes, true)] {
                for r in regions.iter() {
                    for (prev, prev_write, prev_end) in &access_log[r.buffer.0] {
                        if (write || *prev_write) && r.overlap(prev).is_some() {
                            start = start.max(*prev_end);
                        }
                    }
                }
            }
        }
        let end = start + durations[node];

        program.apply(members[0], &mut memory);
        for &m in members {
            let op = program.op(m);
            for r in &op.reads {
                access_log[r.buffer.0].push((*r, false, end));
            }
            for r in &op.writes {
                access_log[r.buffer.0].push((*r, true, end));
            }
            entries.push(TraceEntry { op: m, start, end });
        }
        let moved = node_traffic(program, members[0]);
        volume.add(moved);
        volume_by_role.entry(program.op(members[0]).tag.role).or_default().add(moved);

        done[node] = true;
        ends[node] = end;
        for &s in &graph.succs[node] {
            pending[s] -= 1;
            if pending[s] == 0 && !graph.unsatisfiable[s] {
                ready.insert(s);
            }
        }
    }

    if done.iter().any(|d| !d) {
        return Err(diagnose_deadlock(program, &graph, &done));
    }
    Ok(Trace::new(entries, memory, volume, volume_by_role, program.ops().len()))
}

fn node_duration(program: &Program, first: OpId, cost: &CostModel) -> f64 {
    let op = program.op(first);
    match op.kind {
        OpKind::Compute => op.compute_passes * cost.compute_time_per_layer_pass,
        OpKind::MemcpyD2D => cost.memcpy_time(op.payload_bytes),
        OpKind::AllGather | OpKind::ReduceScatter | OpKind::AllToAll => {
            let c = program.collective(op.collective.expect("collective member"));
            cost.collective_time(c.kind, &c.group, c.payload_bytes_per_rank)
        }
        OpKind::EventRecord | OpKind::EventWait | OpKind::HostSync => 0.0,
    }
}

fn node_traffic(program: &Program, first: OpId) -> LinkBytes {
    let op = program.op(first);
    let Some(c) = op.collective else { return LinkBytes::default() };
    let c = program.collective(c);
    let bytes = wire_bytes(&c.group, c.payload_bytes_per_rank);
    if c.group.spans_nodes() {
        LinkBytes { intra: 0.0, inter: bytes }
    } else {
        LinkBytes { intra: bytes, inter: 0.0 }
    }
}

/// Follows "blocked by" links from each stream head until a repeat (a wait
/// cycle) or a wait that can never be satisfied.
fn diagnose_deadlock(program: &Program, graph: &Graph, done: &[bool]) -> Error {
    let op_done = |o: OpId| done[graph.node_of[o.0]];
    let mut stream_pred: Vec<Option<OpId>> = vec![None; program.ops().len()];
    let mut waiting = Vec::new();
    for queue in program.streams().values() {
        for w in queue.windows(2) {
            stream_pred[w[1].0] = Some(w[0]);
        }
        if let Some(&head) = queue.iter().find(|&&o| !op_done(o)) {
            waiting.push(head);
        }
    }

    let own_blocker = |o: OpId| -> Option<OpId> {
        let op = program.op(o);
        if let Some(p) = stream_pred[o.0].filter(|&p| !op_done(p)) {
            return Some(p);
        }
        match op.kind {
            OpKind::EventWait => op.event.and_then(|e| program.event_record(e)).filter(|&r| !op_done(r)),
            OpKind::HostSync => op.deps.iter().copied().find(|&d| !op_done(d)),
            _ => None,
        }
    };
    let blocker = |o: OpId| -> Option<OpId> {
        own_blocker(o).or_else(|| {
            let c = program.op(o).collective?;
            program.collective(c).members.iter().copied().find(|&m| m != o && own_blocker(m).is_some())
        })
    };

    let mut cycle = Vec::new();
    'heads: for &head in &waiting {
        let mut path: Vec<OpId> = vec![head];
        let mut cur = head;
        while let Some(next) = blocker(cur) {
            if let Some(pos) = path.iter().position(|&p| p == next) {
                cycle = path[pos..].to_vec();
                break 'heads;
            }
            path.push(next);
            cur = next;
        }
    }
    Error::Deadlock { waiting, cycle }
}
