//! Random mini-programs and a brute-force interleaving oracle.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hpz_sim::numerics::{GarbagePattern, Memory, Region};
use hpz_sim::stream::{Lane, OpKind, OpSpec, Participant, Program, StreamId};
use hpz_sim::topology::{ClusterTopology, CollectiveGroup, CollectiveKind};
use rand::Rng;
use std::sync::Arc;

const BUF_LEN: usize = 4;

fn region<R: Rng>(rng: &mut R, buffers: &[Region]) -> Region {
    let b = buffers[rng.gen_range(0..buffers.len())];
    let offset = rng.gen_range(0..BUF_LEN);
    let len = rng.gen_range(1..=BUF_LEN - offset);
    Region::new(b.buffer, offset, len)
}

fn stream<R: Rng>(rng: &mut R, topo: &ClusterTopology) -> StreamId {
    let device = topo.rank(rng.gen_range(0..topo.world_size())).unwrap();
    StreamId::new(device, Lane::ALL[rng.gen_range(0..3)])
}

/// At most `max_ops` ops over two devices and two shared 4-element buffers
/// holding random values. Every write folds into the old value as
/// `v <- a*v + f(inputs) + c` with random constants unique to its op, and plain
/// readers copy what they saw into a private buffer. No write discards what
/// was there, so any reordering of conflicting accesses changes final memory.
pub fn random_program<R: Rng>(rng: &mut R, max_ops: usize) -> Program {
    let topo = ClusterTopology::new(1, 2);
    let mut mem = Memory::new(GarbagePattern::NanFill, 0);
    let shared: Vec<Region> = (0..2)
        .map(|b| {
            let vals = (0..BUF_LEN).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let id = mem.alloc_with(vals, format!("shared{b}")).unwrap();
            mem.whole(id)
        })
        .collect();
    let mut program = Program::new(mem);
    let mut recorded = Vec::new();
    let target = rng.gen_range(1..=max_ops);
    while program.ops().len() < target {
        let (a, c): (f32, f32) = (rng.gen_range(1.5..2.5), rng.gen_range(-1.0..1.0));
        let room = target - program.ops().len();
        match rng.gen_range(0..7) {
            0 | 1 => {
                let r = region(rng, &shared);
                program
                    .enqueue(OpSpec::compute(stream(rng, &topo)).reads([r]).writes([r]).action(move |m: &mut Memory| {
                        let v: Vec<f32> = m.read(r).iter().map(|x| a * x + c).collect();
                        m.write(r, &v);
                    }))
                    .unwrap();
            }
            2 => {
                let r = region(rng, &shared);
                let obs_id = program.memory_mut().alloc_zeroed(r.len, "obs").unwrap();
                let obs = program.memory().whole(obs_id);
                program
                    .enqueue(OpSpec::compute(stream(rng, &topo)).reads([r]).writes([obs]).action(move |m: &mut Memory| {
                        let v = m.read(r).to_vec();
                        m.write(obs, &v);
                    }))
                    .unwrap();
            }
            3 => {
                let src = region(rng, &shared);
                let dst = Region::new(region(rng, &shared).buffer, rng.gen_range(0..=BUF_LEN - src.len), src.len);
                let s = stream(rng, &topo);
                program
                    .enqueue(OpSpec::memcpy(s, src.len as f64 * 4.0).reads([src]).writes([dst]).action(move |m: &mut Memory| {
                        let s = m.read(src).to_vec();
                        let v: Vec<f32> = m.read(dst).iter().zip(&s).map(|(d, x)| a * d + x + c).collect();
                        m.write(dst, &v);
                    }))
                    .unwrap();
            }
            4 if room >= 2 => {
                let (from, to) = (stream(rng, &topo), stream(rng, &topo));
                let e = program.record_event(from);
                recorded.push(e);
                program.wait_event(to, e).unwrap();
            }
            4 if !recorded.is_empty() => {
                let e = recorded[rng.gen_range(0..recorded.len())];
                program.wait_event(stream(rng, &topo), e).unwrap();
            }
            5 => {
                program.host_sync(stream(rng, &topo));
            }
            6 if room >= 2 => {
                let group = CollectiveGroup::new(topo.ranks().collect()).unwrap();
                let lane = Lane::ALL[rng.gen_range(0..3)];
                let io: Vec<(Region, Region)> = (0..2).map(|_| (region(rng, &shared), region(rng, &shared))).collect();
                let participants = group
                    .ranks()
                    .iter()
                    .zip(&io)
                    .map(|(&d, &(r, w))| Participant { stream: StreamId::new(d, lane), reads: vec![r], writes: vec![w] })
                    .collect();
                let action = Arc::new(move |m: &mut Memory| {
                    let seen: Vec<Vec<f32>> = io.iter().map(|&(r, _)| m.read(r).to_vec()).collect();
                    for (i, (&(_, w), s)) in io.iter().zip(&seen).enumerate() {
                        let sum: f32 = s.iter().sum();
                        let old = m.read(w).to_vec();
                        let v: Vec<f32> = old.iter().enumerate().map(|(j, d)| a * d + sum + c + (i * BUF_LEN + j) as f32 * 0.37).collect();
                        m.write(w, &v);
                    }
                });
                program
                    .enqueue_collective(CollectiveKind::AllGather, group, participants, 16.0, Default::default(), Some(action))
                    .unwrap();
            }
            _ => {}
        }
    }
    program
}

/// Happens-before graph rebuilt from the program's public structure:
/// collective members collapse to one node.
pub struct HbGraph {
    pub nodes: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
}

pub fn hb_graph(program: &Program) -> HbGraph {
    let ops = program.ops();
    let mut node_of = vec![usize::MAX; ops.len()];
    let mut nodes = Vec::new();
    for op in ops {
        if node_of[op.id.0] != usize::MAX {
            continue;
        }
        let members: Vec<usize> = match op.collective {
            Some(c) => program.collective(c).members.iter().map(|m| m.0).collect(),
            None => vec![op.id.0],
        };
        for &m in &members {
            node_of[m] = nodes.len();
        }
        nodes.push(members);
    }
    let mut preds: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); nodes.len()];
    let mut edge = |from_op: usize, to_op: usize| {
        let (a, b) = (node_of[from_op], node_of[to_op]);
        if a != b {
            preds[b].insert(a);
        }
    };
    for queue in program.streams().values() {
        for w in queue.windows(2) {
            edge(w[0].0, w[1].0);
        }
    }
    for op in ops {
        match op.kind {
            OpKind::EventWait => {
                let rec = program.event_record(op.event.unwrap()).expect("generator waits on recorded events");
                edge(rec.0, op.id.0);
            }
            OpKind::HostSync => {
                for d in &op.deps {
                    edge(d.0, op.id.0);
                }
            }
            _ => {}
        }
    }
    HbGraph { nodes, preds: preds.into_iter().map(|s| s.into_iter().collect()).collect() }
}

fn snapshot(m: &Memory) -> Vec<Vec<u32>> {
    m.buffers().iter().map(|b| b.values.iter().map(|v| v.to_bits()).collect()).collect()
}

/// Number of distinct final memories over every linear extension of the
/// happens-before order (stops early at 2).
pub fn distinct_outcomes(program: &Program) -> usize {
    let g = hb_graph(program);
    let n = g.nodes.len();
    let mut succs = vec![Vec::new(); n];
    for (i, ps) in g.preds.iter().enumerate() {
        for &p in ps {
            succs[p].push(i);
        }
    }
    let mut pending: Vec<usize> = g.preds.iter().map(Vec::len).collect();
    let mut seen: BTreeMap<Vec<Vec<u32>>, ()> = BTreeMap::new();
    let mut done = vec![false; n];

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        program: &Program,
        g: &HbGraph,
        succs: &[Vec<usize>],
        pending: &mut [usize],
        done: &mut [bool],
        placed: usize,
        mem: &Memory,
        seen: &mut BTreeMap<Vec<Vec<u32>>, ()>,
    ) {
        if seen.len() > 1 {
            return;
        }
        if placed == g.nodes.len() {
            seen.insert(snapshot(mem), ());
            return;
        }
        for i in 0..g.nodes.len() {
            if done[i] || pending[i] != 0 {
                continue;
            }
            let mut next = mem.clone();
            program.apply(hpz_sim::stream::OpId(g.nodes[i][0]), &mut next);
            done[i] = true;
            for &s in &succs[i] {
                pending[s] -= 1;
            }
            dfs(program, g, succs, pending, done, placed + 1, &next, seen);
            for &s in &succs[i] {
                pending[s] += 1;
            }
            done[i] = false;
        }
    }
    dfs(program, &g, &succs, &mut pending, &mut done, 0, program.memory(), &mut seen);
    seen.len()
}
