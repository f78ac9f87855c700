use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Lane, OpId, OpKind, OpRole, Program};
use crate::error::Result;
use crate::numerics::Memory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub op: OpId,
    pub start: f64,
    pub end: f64,
}

/// Bytes moved over links, split by link class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkBytes {
    pub intra: f64,
    pub inter: f64,
}

impl LinkBytes {
    pub fn add(&mut self, other: LinkBytes) {
        self.intra += other.intra;
        self.inter += other.inter;
    }
}

/// An executed schedule: ops in dispatch order with simulated times, the
/// final memory, and communication volume.
#[derive(Debug, Clone)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    pub memory: Memory,
    pub volume: LinkBytes,
    pub volume_by_role: BTreeMap<OpRole, LinkBytes>,
    times: Vec<(f64, f64)>,
}

/// One JSON line of an exported trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: usize,
    pub device: usize,
    pub lane: Lane,
    pub kind: OpKind,
    pub start_s: f64,
    pub end_s: f64,
    pub bytes: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<usize>,
}

impl Trace {
    pub(crate) fn new(
        entries: Vec<TraceEntry>,
        memory: Memory,
        volume: LinkBytes,
        volume_by_role: BTreeMap<OpRole, LinkBytes>,
        num_ops: usize,
    ) -> Self {
        let mut times = vec![(f64::NAN, f64::NAN); num_ops];
        for e in &entries {
            times[e.op.0] = (e.start, e.end);
        }
        Trace { entries, memory, volume, volume_by_role, times }
    }

    pub fn makespan(&self) -> f64 {
        self.entries.iter().map(|e| e.end).fold(0.0, f64::max)
    }

    /// `(start, end)` of an op.
    pub fn span(&self, op: OpId) -> (f64, f64) {
        self.times[op.0]
    }

    /// Ops in the order their effects were applied.
    pub fn order(&self) -> Vec<OpId> {
        self.entries.iter().map(|e| e.op).collect()
    }

    pub fn role_volume(&self, role: OpRole) -> LinkBytes {
        self.volume_by_role.get(&role).copied().unwrap_or_default()
    }

    pub fn records(&self, program: &Program, step: Option<usize>) -> Vec<TraceRecord> {
        self.entries
            .iter()
            .map(|e| {
                let op = program.op(e.op);
                TraceRecord {
                    id: e.op.0,
                    device: op.stream.device.global,
                    lane: op.stream.lane,
                    kind: op.kind,
                    start_s: e.start,
                    end_s: e.end,
                    bytes: op.payload_bytes,
                    step,
                }
            })
            .collect()
    }

    pub fn write_jsonl(&self, program: &Program, step: Option<usize>, mut out: impl Write) -> Result<()> {
        for rec in self.records(program, step) {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
