use super::*;
use crate::numerics::{GarbagePattern, Memory};
use crate::topology::{world_group, ClusterTopology, CostModel};

fn cost_ms() -> CostModel {
    // 1 ms per compute pass, zero-latency links
    let mut topo = ClusterTopology::new(1, 2);
    topo.intra_latency = 0.0;
    topo.inter_latency = 0.0;
    CostModel::new(topo, 1e-3).unwrap()
}

fn dev(topo: &ClusterTopology, g: usize, lane: Lane) -> StreamId {
    StreamId::new(topo.rank(g).unwrap(), lane)
}

/// Copy lane writes `secondary` from `source`; comm lane gathers `secondary`
/// into `gathered` on a one-rank group.
fn race_program(with_event: bool) -> (Program, crate::numerics::BufferId) {
    let topo = ClusterTopology::new(1, 1);
    let mut mem = Memory::new(GarbagePattern::NanFill, 0);
    let source = mem.alloc_with(vec![1.0, 2.0, 3.0, 4.0], "source").unwrap();
    let secondary = mem.alloc_uninitialized(4, "secondary").unwrap();
    let gathered = mem.alloc_uninitialized(4, "gathered").unwrap();
    let mut p = Program::new(mem);
    let copy = dev(&topo, 0, Lane::Copy);
    let comm = dev(&topo, 0, Lane::Comm);
    let (src, sec, gat) = (p.memory().whole(source), p.memory().whole(secondary), p.memory().whole(gathered));
    p.enqueue(
        OpSpec::memcpy(copy, 16.0)
            .reads([src])
            .writes([sec])
            .action(move |m| {
                let v = m.read(src).to_vec();
                m.write(sec, &v);
            }),
    )
    .unwrap();
    if with_event {
        let e = p.record_event(copy);
        p.wait_event(comm, e).unwrap();
    }
    let group = world_group(&topo);
    p.enqueue_collective(
        crate::topology::CollectiveKind::AllGather,
        group,
        vec![Participant { stream: comm, reads: vec![sec], writes: vec![gat] }],
        16.0,
        OpTag::default(),
        Some(std::sync::Arc::new(move |m: &mut Memory| {
            let v = m.read(sec).to_vec();
            m.write(gat, &v);
        })),
    )
    .unwrap();
    (p, gathered)
}

#[test]
fn fifo_on_one_stream() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let s = dev(&topo, 0, Lane::Compute);
    let a = p.enqueue(OpSpec::compute(s)).unwrap();
    let b = p.enqueue(OpSpec::compute(s)).unwrap();
    for policy in [SchedulePolicy::ProgramOrder, SchedulePolicy::Adversarial, SchedulePolicy::RandomSeeded(3)] {
        let t = run(&p, policy, &cost_ms()).unwrap();
        assert_eq!(t.order(), vec![a, b]);
        assert!(t.span(a).1 <= t.span(b).0);
    }
}

#[test]
fn serial_compute_sums() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let s = dev(&topo, 0, Lane::Compute);
    for _ in 0..3 {
        p.enqueue(OpSpec::compute(s)).unwrap();
    }
    let t = run(&p, SchedulePolicy::ProgramOrder, &cost_ms()).unwrap();
    assert!((t.makespan() - 3e-3).abs() < 1e-15);
}

#[test]
fn adversarial_race_reads_garbage() {
    let (p, gathered) = race_program(false);
    let t = run(&p, SchedulePolicy::Adversarial, &cost_ms()).unwrap();
    assert!(t.memory.values(gathered).iter().all(|v| v.is_nan()));
    let hazards = detect_hazards(&p);
    assert_eq!(hazards.len(), 1);
    assert_eq!(p.op(hazards[0].writer).kind, OpKind::MemcpyD2D);
    assert_eq!(p.op(hazards[0].reader).kind, OpKind::AllGather);
    assert_eq!(hazards[0].kind, HazardKind::ReadBeforeWriteCommit);
}

#[test]
fn program_order_race_is_benign() {
    let (p, gathered) = race_program(false);
    let t = run(&p, SchedulePolicy::ProgramOrder, &cost_ms()).unwrap();
    assert_eq!(t.memory.values(gathered), &[1.0, 2.0, 3.0, 4.0]);
    let copy = p.ops().iter().find(|o| o.kind == OpKind::MemcpyD2D).unwrap().id;
    let gather = p.ops().iter().find(|o| o.kind == OpKind::AllGather).unwrap().id;
    assert!(t.span(gather).0 >= t.span(copy).1);
}

#[test]
fn event_removes_hazard() {
    let (p, gathered) = race_program(true);
    assert!(detect_hazards(&p).is_empty());
    for policy in [SchedulePolicy::ProgramOrder, SchedulePolicy::Adversarial, SchedulePolicy::RandomSeeded(9)] {
        let t = run(&p, policy, &cost_ms()).unwrap();
        assert_eq!(t.memory.values(gathered), &[1.0, 2.0, 3.0, 4.0]);
        let copy = p.ops().iter().find(|o| o.kind == OpKind::MemcpyD2D).unwrap().id;
        let gather = p.ops().iter().find(|o| o.kind == OpKind::AllGather).unwrap().id;
        assert!(t.span(gather).0 >= t.span(copy).1);
    }
}

#[test]
fn record_on_empty_stream_completes_at_zero() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let e = p.record_event(dev(&topo, 0, Lane::Copy));
    let rec = p.event_record(e).unwrap();
    let t = run(&p, SchedulePolicy::ProgramOrder, &cost_ms()).unwrap();
    assert_eq!(t.span(rec), (0.0, 0.0));
}

#[test]
fn records_complete_in_order() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let s = dev(&topo, 0, Lane::Compute);
    p.enqueue(OpSpec::compute(s)).unwrap();
    let e1 = p.record_event(s);
    p.enqueue(OpSpec::compute(s)).unwrap();
    let e2 = p.record_event(s);
    let t = run(&p, SchedulePolicy::RandomSeeded(1), &cost_ms()).unwrap();
    let (r1, r2) = (p.event_record(e1).unwrap(), p.event_record(e2).unwrap());
    assert!(t.span(r1).1 < t.span(r2).1);
    assert!((t.span(r1).1 - 1e-3).abs() < 1e-15);
}

#[test]
fn wait_creates_cross_stream_edge() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let (a, b) = (dev(&topo, 0, Lane::Compute), dev(&topo, 0, Lane::Comm));
    p.enqueue(OpSpec::compute(a).passes(2.0)).unwrap();
    let e = p.record_event(a);
    p.wait_event(b, e).unwrap();
    let after = p.enqueue(OpSpec::compute(b)).unwrap();
    let t = run(&p, SchedulePolicy::Adversarial, &cost_ms()).unwrap();
    assert!((t.span(after).0 - 2e-3).abs() < 1e-15);
}

#[test]
fn wait_enqueued_before_record() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let (a, b) = (dev(&topo, 0, Lane::Compute), dev(&topo, 0, Lane::Comm));
    let e = p.create_event();
    p.wait_event(b, e).unwrap();
    let after = p.enqueue(OpSpec::compute(b)).unwrap();
    p.enqueue(OpSpec::compute(a)).unwrap();
    p.record(a, e).unwrap();
    let t = run(&p, SchedulePolicy::ProgramOrder, &cost_ms()).unwrap();
    assert!((t.span(after).0 - 1e-3).abs() < 1e-15);
}

#[test]
fn unrecorded_wait_deadlocks() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let e = p.create_event();
    let w = p.wait_event(dev(&topo, 0, Lane::Comm), e).unwrap();
    match run(&p, SchedulePolicy::ProgramOrder, &cost_ms()) {
        Err(Error::Deadlock { waiting, cycle }) => {
            assert_eq!(waiting, vec![w]);
            assert!(cycle.is_empty());
        }
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn two_cycle_of_waits_deadlocks() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let (a, b) = (dev(&topo, 0, Lane::Compute), dev(&topo, 0, Lane::Comm));
    let (e1, e2) = (p.create_event(), p.create_event());
    let wa = p.wait_event(a, e1).unwrap();
    let ra = p.record(a, e2).unwrap();
    let wb = p.wait_event(b, e2).unwrap();
    let rb = p.record(b, e1).unwrap();
    match run(&p, SchedulePolicy::Adversarial, &cost_ms()) {
        Err(Error::Deadlock { waiting, cycle }) => {
            assert_eq!(waiting.len(), 2);
            let mut c = cycle.clone();
            c.sort();
            assert_eq!(c, {
                let mut v = vec![wa, ra, wb, rb];
                v.sort();
                v
            });
        }
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn rendezvous_aligns_members() {
    let topo = ClusterTopology::new(1, 2);
    let mut mem = Memory::default();
    let x = mem.alloc_zeroed(2, "x").unwrap();
    let y = mem.alloc_zeroed(2, "y").unwrap();
    let mut p = Program::new(mem);
    // rank 1's comm lane is busy for 3 ms first
    p.enqueue(OpSpec::compute(dev(&topo, 1, Lane::Comm)).passes(3.0)).unwrap();
    let group = world_group(&topo);
    let c = p
        .enqueue_collective(
            crate::topology::CollectiveKind::AllGather,
            group,
            vec![
                Participant { stream: dev(&topo, 0, Lane::Comm), reads: vec![], writes: vec![p.memory().whole(x)] },
                Participant { stream: dev(&topo, 1, Lane::Comm), reads: vec![], writes: vec![p.memory().whole(y)] },
            ],
            8.0,
            OpTag::default(),
            None,
        )
        .unwrap();
    let t = run(&p, SchedulePolicy::RandomSeeded(5), &cost_ms()).unwrap();
    let members = &p.collective(c).members;
    assert_eq!(t.span(members[0]), t.span(members[1]));
    assert!((t.span(members[0]).0 - 3e-3).abs() < 1e-15);
}

#[test]
fn host_sync_waits_other_lanes() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    p.enqueue(OpSpec::compute(dev(&topo, 0, Lane::Compute)).passes(2.0)).unwrap();
    p.enqueue(OpSpec::compute(dev(&topo, 0, Lane::Copy)).passes(1.0)).unwrap();
    let s = p.host_sync(dev(&topo, 0, Lane::Comm));
    let t = run(&p, SchedulePolicy::Adversarial, &cost_ms()).unwrap();
    assert!((t.span(s).0 - 2e-3).abs() < 1e-15);
    assert!(p.op(s).reads.is_empty() && p.op(s).writes.is_empty());
}

#[test]
fn dangling_region_is_invalid() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let bogus = crate::numerics::Region::new(crate::numerics::BufferId(7), 0, 1);
    let err = p.enqueue(OpSpec::compute(dev(&topo, 0, Lane::Compute)).reads([bogus])).unwrap_err();
    assert!(matches!(err, Error::InvalidProgram(_)));
}

#[test]
fn double_record_is_invalid() {
    let topo = ClusterTopology::new(1, 1);
    let mut p = Program::new(Memory::default());
    let s = dev(&topo, 0, Lane::Compute);
    let e = p.record_event(s);
    assert!(p.record(s, e).is_err());
}

#[test]
fn run_is_deterministic() {
    let (p, _) = race_program(false);
    for policy in [SchedulePolicy::ProgramOrder, SchedulePolicy::Adversarial, SchedulePolicy::RandomSeeded(42)] {
        let a = run(&p, policy, &cost_ms()).unwrap();
        let b = run(&p, policy, &cost_ms()).unwrap();
        assert_eq!(a.entries, b.entries);
        let bits = |t: &Trace| t.memory.buffers().iter().flat_map(|b| b.values.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn trace_jsonl_fields() {
    let (p, _) = race_program(true);
    let t = run(&p, SchedulePolicy::ProgramOrder, &cost_ms()).unwrap();
    let mut out = Vec::new();
    t.write_jsonl(&p, None, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), p.ops().len());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["id", "device", "lane", "kind", "start_s", "end_s", "bytes"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["kind"], "MemcpyD2D");
    assert_eq!(first["lane"], "copy");
}
