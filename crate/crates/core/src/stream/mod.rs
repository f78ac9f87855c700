//! Stream-ordered asynchronous execution.
//!
//! Every device has three FIFO lanes (compute, copy, comm). Ops on different
//! lanes are unordered unless an event record/wait pair, a host sync, or a
//! collective rendezvous links them. A [`Program`] is built host-side by
//! enqueueing ops; [`run`] interprets it under a [`SchedulePolicy`] and
//! [`detect_hazards`] finds conflicting accesses the program leaves unordered.

mod engine;
mod graph;
mod hazards;
mod trace;

pub use engine::{run, SchedulePolicy};
pub use hazards::{detect_hazards, Hazard, HazardKind};
pub use trace::{LinkBytes, Trace, TraceEntry, TraceRecord};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Memory, Region};
use crate::topology::{CollectiveGroup, CollectiveKind, DeviceRank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpId(pub usize);

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CollectiveId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Compute,
    Copy,
    Comm,
}

impl Lane {
    pub const ALL: [Lane; 3] = [Lane::Compute, Lane::Copy, Lane::Comm];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub device: DeviceRank,
    pub lane: Lane,
}

impl StreamId {
    pub fn new(device: DeviceRank, lane: Lane) -> Self {
        StreamId { device, lane }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Compute,
    MemcpyD2D,
    AllGather,
    ReduceScatter,
    AllToAll,
    EventRecord,
    EventWait,
    HostSync,
}

impl OpKind {
    pub fn collective(kind: CollectiveKind) -> OpKind {
        match kind {
            CollectiveKind::AllGather => OpKind::AllGather,
            CollectiveKind::ReduceScatter => OpKind::ReduceScatter,
            CollectiveKind::AllToAll => OpKind::AllToAll,
        }
    }

    pub fn is_collective(self) -> bool {
        matches!(self, OpKind::AllGather | OpKind::ReduceScatter | OpKind::AllToAll)
    }

    pub fn is_sync(self) -> bool {
        matches!(self, OpKind::EventRecord | OpKind::EventWait | OpKind::HostSync)
    }
}

/// What an op is for in the training step; used for traffic attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpRole {
    ForwardGather,
    BackwardGather,
    GradReduce,
    SecondaryCopy,
    Forward,
    Backward,
    OptimizerStep,
    Sync,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpTag {
    pub role: OpRole,
    pub layer: Option<usize>,
}

impl Default for OpTag {
    fn default() -> Self {
        OpTag { role: OpRole::Other, layer: None }
    }
}

impl OpTag {
    pub fn new(role: OpRole, layer: Option<usize>) -> Self {
        OpTag { role, layer }
    }
}

/// Value-level effect of an op, applied atomically when the op is dispatched.
pub type Action = Arc<dyn Fn(&mut Memory) + Send + Sync>;

#[derive(Clone)]
pub struct StreamOp {
    pub id: OpId,
    pub stream: StreamId,
    pub kind: OpKind,
    pub reads: Vec<Region>,
    pub writes: Vec<Region>,
    pub group: Option<CollectiveGroup>,
    pub payload_bytes: f64,
    /// Number of layer passes a compute op costs.
    pub compute_passes: f64,
    pub event: Option<EventId>,
    pub collective: Option<CollectiveId>,
    /// Extra happens-before predecessors (host syncs).
    pub deps: Vec<OpId>,
    pub tag: OpTag,
    pub action: Option<Action>,
}

impl fmt::Debug for StreamOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StreamOp")
            .field("id", &self.id)
            .field("stream", &self.stream)
            .field("kind", &self.kind)
            .field("reads", &self.reads)
            .field("writes", &self.writes)
            .field("event", &self.event)
            .field("collective", &self.collective)
            .field("tag", &self.tag)
            .finish()
    }
}

/// Builder for a single-stream op (compute or device copy).
#[derive(Clone)]
pub struct OpSpec {
    stream: StreamId,
    kind: OpKind,
    reads: Vec<Region>,
    writes: Vec<Region>,
    payload_bytes: f64,
    compute_passes: f64,
    tag: OpTag,
    action: Option<Action>,
}

impl OpSpec {
    pub fn compute(stream: StreamId) -> Self {
        Self::with_kind(stream, OpKind::Compute).passes(1.0)
    }

    pub fn memcpy(stream: StreamId, bytes: f64) -> Self {
        let mut s = Self::with_kind(stream, OpKind::MemcpyD2D);
        s.payload_bytes = bytes;
        s
    }

    fn with_kind(stream: StreamId, kind: OpKind) -> Self {
        OpSpec {
            stream,
            kind,
            reads: Vec::new(),
            writes: Vec::new(),
            payload_bytes: 0.0,
            compute_passes: 0.0,
            tag: OpTag::default(),
            action: None,
        }
    }

    pub fn passes(mut self, passes: f64) -> Self {
        self.compute_passes = passes;
        self
    }

    pub fn reads(mut self, regions: impl IntoIterator<Item = Region>) -> Self {
        self.reads.extend(regions);
        self
    }

    pub fn writes(mut self, regions: impl IntoIterator<Item = Region>) -> Self {
        self.writes.extend(regions);
        self
    }

    pub fn tag(mut self, tag: OpTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn action(mut self, f: impl Fn(&mut Memory) + Send + Sync + 'static) -> Self {
        self.action = Some(Arc::new(f));
        self
    }
}

/// One participant's view of a collective: its comm stream and its accesses.
#[derive(Debug, Clone)]
pub struct Participant {
    pub stream: StreamId,
    pub reads: Vec<Region>,
    pub writes: Vec<Region>,
}

#[derive(Clone)]
pub struct Collective {
    pub id: CollectiveId,
    pub kind: CollectiveKind,
    pub group: CollectiveGroup,
    pub members: Vec<OpId>,
    pub payload_bytes_per_rank: f64,
    pub action: Option<Action>,
}

/// A host-built, immutable-once-run set of stream ops over an initial memory.
#[derive(Clone)]
pub struct Program {
    memory: Memory,
    ops: Vec<StreamOp>,
    streams: BTreeMap<StreamId, Vec<OpId>>,
    events: Vec<Option<OpId>>,
    collectives: Vec<Collective>,
}

impl Program {
    pub fn new(memory: Memory) -> Self {
        Program { memory, ops: Vec::new(), streams: BTreeMap::new(), events: Vec::new(), collectives: Vec::new() }
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    /// Host-side allocation happens immediately, before any op runs.
    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.memory
    }

    pub fn ops(&self) -> &[StreamOp] {
        &self.ops
    }

    pub fn op(&self, id: OpId) -> &StreamOp {
        &self.ops[id.0]
    }

    pub fn streams(&self) -> &BTreeMap<StreamId, Vec<OpId>> {
        &self.streams
    }

    pub fn collectives(&self) -> &[Collective] {
        &self.collectives
    }

    pub fn collective(&self, id: CollectiveId) -> &Collective {
        &self.collectives[id.0]
    }

    /// The op that records `event`, if it has been enqueued.
    pub fn event_record(&self, event: EventId) -> Option<OpId> {
        self.events.get(event.0).copied().flatten()
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    fn check_regions(&self, regions: &[Region]) -> Result<()> {
        for r in regions {
            if !self.memory.contains(r) {
                return Err(Error::InvalidProgram(format!(
                    "region {}[{}..{}] does not reference allocated memory",
                    r.buffer,
                    r.offset,
                    r.offset + r.len
                )));
            }
        }
        Ok(())
    }

    fn push(&mut self, mut op: StreamOp) -> OpId {
        let id = OpId(self.ops.len());
        op.id = id;
        self.streams.entry(op.stream).or_default().push(id);
        self.ops.push(op);
        id
    }

    fn bare(stream: StreamId, kind: OpKind, tag: OpTag) -> StreamOp {
        StreamOp {
            id: OpId(usize::MAX),
            stream,
            kind,
            reads: Vec::new(),
            writes: Vec::new(),
            group: None,
            payload_bytes: 0.0,
            compute_passes: 0.0,
            event: None,
            collective: None,
            deps: Vec::new(),
            tag,
            action: None,
        }
    }

    /// Appends a compute or copy op to its stream.
    pub fn enqueue(&mut self, spec: OpSpec) -> Result<OpId> {
        if !matches!(spec.kind, OpKind::Compute | OpKind::MemcpyD2D) {
            return Err(Error::InvalidProgram(format!("{:?} must be enqueued through its dedicated call", spec.kind)));
        }
        self.check_regions(&spec.reads)?;
        self.check_regions(&spec.writes)?;
        let mut op = Self::bare(spec.stream, spec.kind, spec.tag);
        op.reads = spec.reads;
        op.writes = spec.writes;
        op.payload_bytes = spec.payload_bytes;
        op.compute_passes = spec.compute_passes;
        op.action = spec.action;
        Ok(self.push(op))
    }

    /// Enqueues one member op per participant; the collective starts only when
    /// every participant's stream has reached it. `action` runs once for the
    /// whole collective.
    pub fn enqueue_collective(
        &mut self,
        kind: CollectiveKind,
        group: CollectiveGroup,
        participants: Vec<Participant>,
        payload_bytes_per_rank: f64,
        tag: OpTag,
        action: Option<Action>,
    ) -> Result<CollectiveId> {
        if participants.len() != group.size() {
            return Err(Error::InvalidProgram(format!(
                "collective over {} ranks given {} participants",
                group.size(),
                participants.len()
            )));
        }
        for (p, r) in participants.iter().zip(group.ranks()) {
            if p.stream.device != *r {
                return Err(Error::InvalidProgram("participant order must follow group rank order".into()));
            }
            self.check_regions(&p.reads)?;
            self.check_regions(&p.writes)?;
        }
        let cid = CollectiveId(self.collectives.len());
        let mut members = Vec::with_capacity(participants.len());
        for p in participants {
            let mut op = Self::bare(p.stream, OpKind::collective(kind), tag);
            op.reads = p.reads;
            op.writes = p.writes;
            op.group = Some(group.clone());
            op.payload_bytes = payload_bytes_per_rank;
            op.collective = Some(cid);
            members.push(self.push(op));
        }
        self.collectives.push(Collective { id: cid, kind, group, members, payload_bytes_per_rank, action });
        Ok(cid)
    }

    pub fn create_event(&mut self) -> EventId {
        self.events.push(None);
        EventId(self.events.len() - 1)
    }

    /// Records an existing event on `stream`; it completes once every op
    /// enqueued on that stream before it has completed.
    pub fn record(&mut self, stream: StreamId, event: EventId) -> Result<OpId> {
        match self.events.get(event.0) {
            None => return Err(Error::InvalidProgram(format!("unknown event {}", event.0))),
            Some(Some(_)) => return Err(Error::InvalidProgram(format!("event {} recorded twice", event.0))),
            Some(None) => {}
        }
        let mut op = Self::bare(stream, OpKind::EventRecord, OpTag::new(OpRole::Sync, None));
        op.event = Some(event);
        let id = self.push(op);
        self.events[event.0] = Some(id);
        Ok(id)
    }

    pub fn record_event(&mut self, stream: StreamId) -> EventId {
        let e = self.create_event();
        self.record(stream, e).expect("fresh event");
        e
    }

    /// Later ops on `stream` happen after the event's record.
    pub fn wait_event(&mut self, stream: StreamId, event: EventId) -> Result<OpId> {
        if event.0 >= self.events.len() {
            return Err(Error::InvalidProgram(format!("unknown event {}", event.0)));
        }
        let mut op = Self::bare(stream, OpKind::EventWait, OpTag::new(OpRole::Sync, None));
        op.event = Some(event);
        Ok(self.push(op))
    }

    /// Blocks `stream` until everything already enqueued on the device's other
    /// lanes has completed.
    pub fn host_sync(&mut self, stream: StreamId) -> OpId {
        let deps = Lane::ALL
            .iter()
            .filter(|&&l| l != stream.lane)
            .filter_map(|&l| self.streams.get(&StreamId::new(stream.device, l)).and_then(|q| q.last().copied()))
            .collect();
        let mut op = Self::bare(stream, OpKind::HostSync, OpTag::new(OpRole::Sync, None));
        op.deps = deps;
        self.push(op)
    }

    /// Applies an op's value effect to `memory`. For a collective member this
    /// runs the collective's action.
    pub fn apply(&self, id: OpId, memory: &mut Memory) {
        let op = &self.ops[id.0];
        let action = match op.collective {
            Some(c) => self.collectives[c.0].action.as_ref(),
            None => op.action.as_ref(),
        };
        if let Some(f) = action {
            f(memory);
        }
    }
}

#[cfg(test)]
mod tests;
