use std::collections::BTreeSet;

use super::{OpId, OpKind, Program};

/// Happens-before skeleton of a program. Members of one collective collapse
/// into a single node (rendezvous); node indices follow first-member op order.
pub(crate) struct Graph {
    pub node_of: Vec<usize>,
    pub nodes: Vec<Vec<OpId>>,
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
    /// Node contains a wait on an event that is never recorded.
    pub unsatisfiable: Vec<bool>,
}

impl Graph {
    pub fn build(program: &Program) -> Graph {
        let ops = program.ops();
        let mut node_of = vec![usize::MAX; ops.len()];
        let mut nodes: Vec<Vec<OpId>> = Vec::new();
        for op in ops {
            if node_of[op.id.0] != usize::MAX {
                continue;
            }
            let members = match op.collective {
                Some(c) => program.collective(c).members.clone(),
                None => vec![op.id],
            };
            for m in &members {
                node_of[m.0] = nodes.len();
            }
            nodes.push(members);
        }

        let mut op_preds: Vec<Vec<OpId>> = vec![Vec::new(); ops.len()];
        let mut unsat_op = vec![false; ops.len()];
        for queue in program.streams().values() {
            for w in queue.windows(2) {
                op_preds[w[1].0].push(w[0]);
            }
        }
        for op in ops {
            match op.kind {
                OpKind::EventWait => match op.event.and_then(|e| program.event_record(e)) {
                    Some(rec) => op_preds[op.id.0].push(rec),
                    None => unsat_op[op.id.0] = true,
                },
                OpKind::HostSync => op_preds[op.id.0].extend(op.deps.iter().copied()),
                _ => {}
            }
        }

        let n = nodes.len();
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        let mut unsatisfiable = vec![false; n];
        for (idx, members) in nodes.iter().enumerate() {
            let mut set = BTreeSet::new();
            for m in members {
                unsatisfiable[idx] |= unsat_op[m.0];
                for p in &op_preds[m.0] {
                    let pn = node_of[p.0];
                    if pn != idx {
                        set.insert(pn);
                    }
                }
            }
            for &p in &set {
                succs[p].push(idx);
            }
            preds[idx] = set.into_iter().collect();
        }
        Graph { node_of, nodes, preds, succs, unsatisfiable }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Kahn order over nodes whose predecessors can all be satisfied; nodes on
    /// a wait cycle or behind an unsatisfiable wait are omitted.
    pub fn topo_order(&self) -> Vec<usize> {
        let mut pending: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> =
            (0..self.len()).filter(|&i| pending[i] == 0 && !self.unsatisfiable[i]).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &s in &self.succs[i] {
                pending[s] -= 1;
                if pending[s] == 0 && !self.unsatisfiable[s] {
                    ready.insert(s);
                }
            }
        }
        order
    }

    /// Strict ancestor sets as bitsets (transitive closure of `preds`).
    pub fn ancestors(&self) -> Vec<BitSet> {
        let mut anc = vec![BitSet::new(self.len()); self.len()];
        for i in self.topo_order() {
            let mut acc = BitSet::new(self.len());
            for &p in &self.preds[i] {
                acc.union_with(&anc[p]);
                acc.insert(p);
            }
            anc[i] = acc;
        }
        anc
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    pub fn new(bits: usize) -> Self {
        BitSet { words: vec![0; bits.div_ceil(64)] }
    }

    pub fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn union_with(&mut self, other: &BitSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }
}
