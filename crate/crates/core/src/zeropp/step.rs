use super::collectives::{gather_action, gather_payload_bytes, reduce_action, reduce_payload_bytes};
use super::{HpzMode, ModelSpec, Scheme};
use crate::error::{Error, Result};
use crate::numerics::{BufferId, Memory, Region};
use crate::stream::{EventId, Lane, OpRole, OpSpec, OpTag, Participant, Program, StreamId};
use crate::topology::{world_group, ClusterTopology, CollectiveGroup, CollectiveKind, DeviceRank};

/// A rank's view of one layer for the optimizer.
#[derive(Debug, Clone, Copy)]
pub struct ShardRef {
    pub layer: usize,
    pub primary: Region,
    pub grad: Region,
    /// Leading elements that are real parameters; the rest is padding.
    pub valid: usize,
}

/// Supplies the per-layer compute ops of a step. Implementations enqueue onto
/// the given compute stream and declare every region they touch.
pub trait LayerCompute {
    /// `params` covers exactly the layer's `N` gathered elements.
    fn forward(&mut self, program: &mut Program, layer: usize, stream: StreamId, params: Region) -> Result<()>;

    /// Must write all of `grad` (padding as zeros).
    fn backward(&mut self, program: &mut Program, layer: usize, stream: StreamId, params: Region, grad: Region)
        -> Result<()>;

    fn optimizer_step(&mut self, program: &mut Program, stream: StreamId, shards: &[ShardRef]) -> Result<()>;
}

/// Per-rank buffers of one layer (index = global rank).
#[derive(Debug, Clone, Default)]
pub struct LayerShardSet {
    pub layer: usize,
    pub primary: Vec<BufferId>,
    pub secondary: Option<Vec<BufferId>>,
    pub full: Option<Vec<BufferId>>,
    pub grad_full: Option<Vec<BufferId>>,
    pub grad_shard: Option<Vec<BufferId>>,
    repartitioned: bool,
}

pub struct StepProgram {
    pub program: Program,
    pub layers: Vec<LayerShardSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy)]
struct Exec {
    layer: usize,
    phase: Phase,
}

/// Emits one training step for every rank, in the order of the hpZ training
/// loop: per forward layer ensure-gather, prefetch, forward, secondary copy;
/// per backward layer (reversed) ensure-gather, prefetch, backward,
/// repartition, gradient reduction; then the optimizer on primary shards.
///
/// `primary[layer][rank]` holds each rank's padded primary shard.
pub fn build_step_program<C: LayerCompute>(
    spec: &ModelSpec,
    scheme: &Scheme,
    topo: &ClusterTopology,
    primary: &[Vec<Vec<f32>>],
    compute: &mut C,
    memory: Memory,
) -> Result<StepProgram> {
    let mut b = Builder::new(spec, scheme, topo, primary, memory)?;
    for j in 0..b.execs.len() {
        let Exec { layer, phase } = b.execs[j];
        b.ensure_gathered(j)?;
        let upcoming = b.upcoming(j);
        b.prefetch_all_gather(&upcoming)?;
        let full = b.layers[layer].full.clone().expect("just gathered");
        let elems = spec.elems(layer);
        match phase {
            Phase::Forward => {
                for (r, &buf) in full.iter().enumerate() {
                    let s = b.stream(r, Lane::Compute);
                    compute.forward(&mut b.program, layer, s, Region::new(buf, 0, elems))?;
                }
                if scheme.hpz.uses_secondary() {
                    b.create_secondary(layer)?;
                    // a backward gather skipped above for want of this copy
                    let deferred = b.upcoming(j);
                    b.prefetch_all_gather(&deferred)?;
                }
                // post-forward release
                b.layers[layer].full = None;
            }
            Phase::Backward => {
                let grads = b.alloc_per_rank(spec.world_size * spec.primary_len(layer), |r| format!("L{layer}.r{r}.grad_full"))?;
                for r in 0..b.ranks.len() {
                    let s = b.stream(r, Lane::Compute);
                    let g = b.program.memory().whole(grads[r]);
                    compute.backward(&mut b.program, layer, s, Region::new(full[r], 0, elems), g)?;
                }
                b.layers[layer].grad_full = Some(grads);
                b.repartition(layer)?;
                b.reduce_gradients(layer)?;
            }
        }
    }
    b.optimizer(compute)?;
    Ok(StepProgram { program: b.program, layers: b.layers })
}

struct Builder<'a> {
    spec: &'a ModelSpec,
    scheme: &'a Scheme,
    topo: &'a ClusterTopology,
    ranks: Vec<DeviceRank>,
    program: Program,
    layers: Vec<LayerShardSet>,
    execs: Vec<Exec>,
    issued: Vec<bool>,
    gather_events: Vec<Vec<EventId>>,
    gather_dest: Vec<Option<Vec<BufferId>>>,
    copy_events: Vec<Option<Vec<EventId>>>,
    last_reduce: Vec<EventId>,
}

impl<'a> Builder<'a> {
    fn new(
        spec: &'a ModelSpec,
        scheme: &'a Scheme,
        topo: &'a ClusterTopology,
        primary: &[Vec<Vec<f32>>],
        memory: Memory,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.world_size != topo.world_size() {
            return Err(Error::InvalidProgram(format!(
                "model spec world size {} does not match topology {}",
                spec.world_size,
                topo.world_size()
            )));
        }
        if primary.len() != spec.num_layers() {
            return Err(Error::InvalidArgument("one primary shard set per layer required".into()));
        }
        let mut program = Program::new(memory);
        let mut layers = Vec::with_capacity(spec.num_layers());
        for (l, shards) in primary.iter().enumerate() {
            if shards.len() != spec.world_size || shards.iter().any(|s| s.len() != spec.primary_len(l)) {
                return Err(Error::InvalidArgument(format!("layer {l}: primary shards must be {} x {}", spec.world_size, spec.primary_len(l))));
            }
            let ids = shards
                .iter()
                .enumerate()
                .map(|(r, s)| program.memory_mut().alloc_with(s.clone(), format!("L{l}.r{r}.primary")))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerShardSet { layer: l, primary: ids, ..Default::default() });
        }

        let n = spec.num_layers();
        let execs: Vec<Exec> = (0..n)
            .map(|layer| Exec { layer, phase: Phase::Forward })
            .chain((0..n).rev().map(|layer| Exec { layer, phase: Phase::Backward }))
            .collect();
        let ranks: Vec<DeviceRank> = topo.ranks().collect();

        Ok(Builder {
            spec,
            scheme,
            topo,
            ranks,
            program,
            layers,
            issued: vec![false; execs.len()],
            gather_events: vec![Vec::new(); execs.len()],
            gather_dest: vec![None; execs.len()],
            copy_events: vec![None; n],
            last_reduce: Vec::new(),
            execs,
        })
    }

    fn stream(&self, rank: usize, lane: Lane) -> StreamId {
        StreamId::new(self.ranks[rank], lane)
    }

    fn alloc_per_rank(&mut self, len: usize, label: impl Fn(usize) -> String) -> Result<Vec<BufferId>> {
        (0..self.ranks.len()).map(|r| self.program.memory_mut().alloc_uninitialized(len, label(r))).collect()
    }

    fn reads_secondary(&self, exec: Exec) -> bool {
        exec.phase == Phase::Backward && self.scheme.hpz.uses_secondary()
    }

    /// The next `prefetch_depth` executions that are not yet gathered and whose
    /// source shard already exists. The last layer's backward gather becomes
    /// eligible once its secondary copy is enqueued, right after its forward.
    fn upcoming(&self, j: usize) -> Vec<usize> {
        let end = (j + self.scheme.prefetch_depth).min(self.execs.len() - 1);
        (j + 1..=end)
            .filter(|&k| !self.issued[k])
            .filter(|&k| !self.reads_secondary(self.execs[k]) || self.layers[self.execs[k].layer].secondary.is_some())
            .collect()
    }

    fn prefetch_all_gather(&mut self, upcoming: &[usize]) -> Result<()> {
        for &k in upcoming {
            self.gather_full(k, false)?;
        }
        Ok(())
    }

    fn ensure_gathered(&mut self, j: usize) -> Result<()> {
        if !self.issued[j] {
            self.gather_full(j, true)?;
        }
        for r in 0..self.ranks.len() {
            let s = self.stream(r, Lane::Compute);
            self.program.wait_event(s, self.gather_events[j][r])?;
        }
        let layer = self.execs[j].layer;
        self.layers[layer].full = self.gather_dest[j].clone();
        Ok(())
    }

    /// Enqueues the gather for execution `j` on every rank's comm lane,
    /// followed by an event the compute lane waits on. A gather that was not
    /// prefetched is fetched on demand behind a host sync.
    fn gather_full(&mut self, j: usize, on_demand: bool) -> Result<()> {
        let exec = self.execs[j];
        let layer = exec.layer;
        let secondary = self.reads_secondary(exec);
        let (sources, shard, groups): (Vec<BufferId>, usize, Vec<CollectiveGroup>) = if secondary {
            let Some(sec) = self.layers[layer].secondary.clone() else {
                return Err(Error::Lifecycle(format!("backward gather of layer {layer} before its secondary copy exists")));
            };
            let groups = (0..self.spec.world_size / self.spec.secondary_world_size)
                .map(|k| self.spec.secondary_group(self.ranks[k * self.spec.secondary_world_size], self.topo))
                .collect();
            (sec, self.spec.secondary_len(layer), groups)
        } else {
            (self.layers[layer].primary.clone(), self.spec.primary_len(layer), vec![world_group(self.topo)])
        };
        let group_size = groups[0].size();
        let role = match exec.phase {
            Phase::Forward => OpRole::ForwardGather,
            Phase::Backward => OpRole::BackwardGather,
        };
        let pass = if exec.phase == Phase::Forward { "fwd" } else { "bwd" };
        let dests = self.alloc_per_rank(group_size * shard, |r| format!("L{layer}.r{r}.full_{pass}"))?;

        for r in 0..self.ranks.len() {
            let comm = self.stream(r, Lane::Comm);
            if on_demand {
                self.program.host_sync(comm);
            }
            if secondary && self.scheme.hpz == HpzMode::Fixed {
                let e = self.copy_events[layer].as_ref().expect("fixed mode records copy events")[r];
                self.program.wait_event(comm, e)?;
            }
        }
        let payload = gather_payload_bytes(shard, self.scheme.qwz);
        for group in groups {
            let members: Vec<usize> = group.ranks().iter().map(|r| r.global).collect();
            let srcs: Vec<Region> = members.iter().map(|&r| self.program.memory().whole(sources[r])).collect();
            let dsts: Vec<Region> = members.iter().map(|&r| self.program.memory().whole(dests[r])).collect();
            let participants = members
                .iter()
                .zip(srcs.iter().zip(&dsts))
                .map(|(&r, (&s, &d))| Participant { stream: self.stream(r, Lane::Comm), reads: vec![s], writes: vec![d] })
                .collect();
            let action = gather_action(srcs, dsts, self.scheme.qwz);
            self.program.enqueue_collective(
                CollectiveKind::AllGather,
                group,
                participants,
                payload,
                OpTag::new(role, Some(layer)),
                Some(action),
            )?;
        }
        self.gather_events[j] = (0..self.ranks.len()).map(|r| self.program.record_event(self.stream(r, Lane::Comm))).collect();
        self.gather_dest[j] = Some(dests);
        self.issued[j] = true;
        Ok(())
    }

    /// Allocates each rank's `ceil(N/P′)` secondary shard (garbage until the
    /// copy commits) and copies the rank's slice of the gathered parameters
    /// into it on the copy lane.
    fn create_secondary(&mut self, layer: usize) -> Result<()> {
        let Some(full) = self.layers[layer].full.clone() else {
            return Err(Error::Lifecycle(format!("secondary copy of layer {layer} without gathered parameters")));
        };
        let elems = self.spec.elems(layer);
        let len = self.spec.secondary_len(layer);
        let secondary = self.alloc_per_rank(len, |r| format!("L{layer}.r{r}.secondary"))?;
        let mut events = Vec::with_capacity(self.ranks.len());
        for r in 0..self.ranks.len() {
            let (compute, copy) = (self.stream(r, Lane::Compute), self.stream(r, Lane::Copy));
            let after_forward = self.program.record_event(compute);
            self.program.wait_event(copy, after_forward)?;

            let local = r % self.spec.secondary_world_size;
            let start = (local * len).min(elems);
            let valid = len.min(elems - start);
            let src = Region::new(full[r], start, valid);
            let dst = self.program.memory().whole(secondary[r]);
            let reads: Vec<Region> = (valid > 0).then_some(src).into_iter().collect();
            self.program.enqueue(
                OpSpec::memcpy(copy, len as f64 * 4.0)
                    .reads(reads)
                    .writes([dst])
                    .tag(OpTag::new(OpRole::SecondaryCopy, Some(layer)))
                    .action(move |m: &mut Memory| {
                        let mut v = m.read(src).to_vec();
                        v.resize(dst.len, 0.0);
                        m.write(dst, &v);
                    }),
            )?;
            if self.scheme.hpz == HpzMode::Fixed {
                events.push(self.program.record_event(copy));
            }
        }
        self.layers[layer].secondary = Some(secondary);
        if self.scheme.hpz == HpzMode::Fixed {
            self.copy_events[layer] = Some(events);
        }
        Ok(())
    }

    /// Releases the gathered parameters; primary (and secondary, until step
    /// end) shards stay.
    fn repartition(&mut self, layer: usize) -> Result<()> {
        let set = &mut self.layers[layer];
        if set.repartitioned || set.full.is_none() {
            return Err(Error::Lifecycle(format!("layer {layer} repartitioned without gathered parameters")));
        }
        set.full = None;
        set.repartitioned = true;
        Ok(())
    }

    /// Mean-reduces gradients over P: f32 ReduceScatter, or with qgZ an int4
    /// AllToAll whose chunks are dequantized and reduced locally.
    fn reduce_gradients(&mut self, layer: usize) -> Result<()> {
        let Some(grads) = self.layers[layer].grad_full.clone() else {
            return Err(Error::Lifecycle(format!("layer {layer} reduced before its backward")));
        };
        let shard = self.spec.primary_len(layer);
        let out = self.alloc_per_rank(shard, |r| format!("L{layer}.r{r}.grad_shard"))?;
        for r in 0..self.ranks.len() {
            let after_backward = self.program.record_event(self.stream(r, Lane::Compute));
            self.program.wait_event(self.stream(r, Lane::Comm), after_backward)?;
        }
        let srcs: Vec<Region> = grads.iter().map(|&g| self.program.memory().whole(g)).collect();
        let dsts: Vec<Region> = out.iter().map(|&g| self.program.memory().whole(g)).collect();
        let participants = (0..self.ranks.len())
            .map(|r| Participant { stream: self.stream(r, Lane::Comm), reads: vec![srcs[r]], writes: vec![dsts[r]] })
            .collect();
        let kind = if self.scheme.qgz { CollectiveKind::AllToAll } else { CollectiveKind::ReduceScatter };
        let action = reduce_action(srcs, dsts, self.scheme.qgz);
        self.program.enqueue_collective(
            kind,
            world_group(self.topo),
            participants,
            reduce_payload_bytes(shard, self.scheme.qgz),
            OpTag::new(OpRole::GradReduce, Some(layer)),
            Some(action),
        )?;
        self.last_reduce = (0..self.ranks.len()).map(|r| self.program.record_event(self.stream(r, Lane::Comm))).collect();
        self.layers[layer].grad_shard = Some(out);
        Ok(())
    }

    fn optimizer<C: LayerCompute>(&mut self, compute: &mut C) -> Result<()> {
        for r in 0..self.ranks.len() {
            let s = self.stream(r, Lane::Compute);
            self.program.wait_event(s, self.last_reduce[r])?;
            let shards: Vec<ShardRef> = self
                .layers
                .iter()
                .map(|set| {
                    let p = self.spec.primary_len(set.layer);
                    let grad = set.grad_shard.as_ref().expect("every layer reduced")[r];
                    ShardRef {
                        layer: set.layer,
                        primary: self.program.memory().whole(set.primary[r]),
                        grad: self.program.memory().whole(grad),
                        valid: p.min(self.spec.elems(set.layer).saturating_sub(r * p)),
                    }
                })
                .collect();
            compute.optimizer_step(&mut self.program, s, &shards)?;
        }
        Ok(())
    }
}

/// Compute ops that only declare their data flow: forward reads parameters,
/// backward writes zero gradients, the optimizer leaves shards unchanged.
/// Useful for structural and cost-only programs.
#[derive(Debug, Default, Clone, Copy)]
pub struct StructuralCompute;

impl LayerCompute for StructuralCompute {
    fn forward(&mut self, program: &mut Program, layer: usize, stream: StreamId, params: Region) -> Result<()> {
        program.enqueue(OpSpec::compute(stream).reads([params]).tag(OpTag::new(OpRole::Forward, Some(layer))))?;
        Ok(())
    }

    fn backward(&mut self, program: &mut Program, layer: usize, stream: StreamId, params: Region, grad: Region) -> Result<()> {
        program.enqueue(
            OpSpec::compute(stream)
                .reads([params])
                .writes([grad])
                .tag(OpTag::new(OpRole::Backward, Some(layer)))
                .action(move |m: &mut Memory| m.write(grad, &vec![0.0; grad.len])),
        )?;
        Ok(())
    }

    fn optimizer_step(&mut self, program: &mut Program, stream: StreamId, shards: &[ShardRef]) -> Result<()> {
        program.enqueue(
            OpSpec::compute(stream)
                .reads(shards.iter().flat_map(|s| [s.primary, s.grad]))
                .writes(shards.iter().map(|s| s.primary))
                .tag(OpTag::new(OpRole::OptimizerStep, None)),
        )?;
        Ok(())
    }
}
