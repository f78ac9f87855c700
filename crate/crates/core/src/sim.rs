//! Multi-step training simulation: one step program per step, run on the
//! engine, with updated primary shards carried into the next step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::{PolicyKind, RunConfig};
use crate::error::Result;
use crate::numerics::Memory;
use crate::stream::{detect_hazards, run, LinkBytes, OpRole};
use crate::trainer::{classify_divergence, init_model, OptimizerState, SyntheticTask, TrainCompute, Verdict};
use crate::zeropp::{build_step_program, partition, HpzMode, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean over ranks; serialized as `null` when not finite.
    pub loss: f64,
    pub step_time_s: f64,
    pub inter_bytes: f64,
    pub intra_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub verdict: Verdict,
    /// Unordered conflicting accesses in the step program (same every step).
    pub hazard_count: usize,
    pub tokens_per_step: u64,
    pub mean_step_time_s: f64,
    pub tokens_per_sec_per_node: f64,
    /// Total over all steps.
    pub inter_bytes: f64,
    pub intra_bytes: f64,
    pub backward_gather_inter_bytes: f64,
    pub backward_gather_intra_bytes: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    pub notes: Vec<String>,
    pub steps: Vec<StepRecord>,
}

impl RunReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.verdict == Verdict::Stable
    }
}

/// Primary shards `[layer][rank]` of the initial model.
pub fn initial_shards(cfg: &RunConfig, spec: &ModelSpec) -> Result<Vec<Vec<Vec<f32>>>> {
    let model = init_model(&cfg.dims, cfg.seed)?;
    Ok(model.params.iter().map(|p| (0..spec.world_size).map(|r| partition(p, spec.world_size, r)).collect()).collect())
}

/// Runs `cfg.steps` training steps. With `trace`, every op of every step is
/// written as one JSON line.
pub fn simulate(cfg: &RunConfig, mut trace: Option<&mut dyn Write>) -> Result<RunReport> {
    cfg.validate()?;
    let topo = cfg.topology();
    let cost = cfg.cost_model()?;
    let spec = cfg.model_spec()?;
    let scheme = cfg.scheme();
    let world = spec.world_size;

    let task = SyntheticTask::new(&cfg.dims, cfg.seed, cfg.batch_size, cfg.tokens_per_step())?;
    let batches: Vec<_> = (0..world).map(|r| task.batch(r)).collect();
    let mut optim = vec![OptimizerState::new(cfg.optimizer_kind(), cfg.lr); world];
    let mut shards = initial_shards(cfg, &spec)?;

    let mut steps = Vec::with_capacity(cfg.steps);
    let mut hazard_count = 0;
    let mut bwd = LinkBytes::default();
    for step in 0..cfg.steps {
        // fresh allocations every step, so fresh garbage
        let memory = Memory::new(cfg.garbage_pattern(), cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut compute = TrainCompute::new(&cfg.dims, &batches, &mut optim)?;
        let built = build_step_program(&spec, &scheme, &topo, &shards, &mut compute, memory)?;
        if step == 0 {
            hazard_count = detect_hazards(&built.program).len();
        }
        let result = run(&built.program, cfg.policy_for(step), &cost)?;
        if let Some(out) = trace.as_deref_mut() {
            result.write_jsonl(&built.program, Some(step), out)?;
        }
        let losses = compute.finish(&result.memory);
        let loss = losses.iter().map(|&l| l as f64).sum::<f64>() / world as f64;
        for (l, set) in built.layers.iter().enumerate() {
            for (r, &id) in set.primary.iter().enumerate() {
                shards[l][r] = result.memory.values(id).to_vec();
            }
        }
        bwd.add(result.role_volume(OpRole::BackwardGather));
        steps.push(StepRecord {
            step,
            loss,
            step_time_s: result.makespan(),
            inter_bytes: result.volume.inter,
            intra_bytes: result.volume.intra,
        });
    }

    let losses: Vec<f64> = steps.iter().map(|s| s.loss).collect();
    let verdict = classify_divergence(&losses, cfg.window)?.status;
    let mean_step_time_s = steps.iter().map(|s| s.step_time_s).sum::<f64>() / steps.len() as f64;
    let tokens_per_step = cfg.tokens_per_step();
    let mut notes = Vec::new();
    if cfg.hpz == HpzMode::Stock && cfg.policy == PolicyKind::ProgramOrder {
        notes.push("stock hpZ under program order: the copy always commits before the gather, so the race does not manifest".into());
    }
    Ok(RunReport {
        config: cfg.clone(),
        verdict,
        hazard_count,
        tokens_per_step,
        mean_step_time_s,
        tokens_per_sec_per_node: tokens_per_step as f64 / mean_step_time_s / cfg.nodes as f64,
        inter_bytes: steps.iter().map(|s| s.inter_bytes).sum(),
        intra_bytes: steps.iter().map(|s| s.intra_bytes).sum(),
        backward_gather_inter_bytes: bwd.inter,
        backward_gather_intra_bytes: bwd.intra,
        trace_path: None,
        notes,
        steps,
    })
}
