//! Toy dense regression model trained against a fixed teacher network.
//!
//! Layer parameters are laid out as a row-major `out x in` weight matrix
//! followed by the `out` biases. Hidden layers use `tanh`; the last layer is
//! linear. Loss is mean squared error over every output element of the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BufferId, Memory, Region};
use crate::stream::{OpRole, OpSpec, OpTag, Program, StreamId};
use crate::zeropp::{LayerCompute, ShardRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub dims: Vec<usize>,
    pub seed: u64,
    /// One flat parameter vector per layer.
    pub params: Vec<Vec<f32>>,
}

impl ToyModel {
    pub fn num_layers(&self) -> usize {
        self.params.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn forward(&self, inputs: &[f32]) -> Vec<f32> {
        let mut h = inputs.to_vec();
        for (l, p) in self.params.iter().enumerate() {
            h = layer_forward(p, self.dims[l], self.dims[l + 1], &h, l + 1 < self.num_layers());
        }
        h
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::config("dims", "need at least two positive dimensions"));
    }
    Ok(())
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn init_scaled(dims: &[usize], seed: u64, gain: f32) -> Result<ToyModel> {
    check_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = dims
        .windows(2)
        .map(|w| {
            let (fan_in, out) = (w[0], w[1]);
            let bound = gain / (fan_in as f32).sqrt();
            let mut p: Vec<f32> = (0..fan_in * out).map(|_| rng.gen_range(-bound..=bound)).collect();
            p.extend((0..out).map(|_| rng.gen_range(-bound..=bound) * 0.1));
            p
        })
        .collect();
    Ok(ToyModel { dims: dims.to_vec(), seed, params })
}

/// Uniform weights in `±1/sqrt(in_dim)`, small biases.
pub fn init_model(dims: &[usize], seed: u64) -> Result<ToyModel> {
    init_scaled(dims, seed, 1.0)
}

/// `y = tanh?(W x + b)` for every row of `input` (`batch x in_dim`).
pub fn layer_forward(params: &[f32], in_dim: usize, out_dim: usize, input: &[f32], activate: bool) -> Vec<f32> {
    let (w, b) = params.split_at(in_dim * out_dim);
    let mut out = Vec::with_capacity(input.len() / in_dim * out_dim);
    for x in input.chunks(in_dim) {
        for o in 0..out_dim {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let z = row.iter().zip(x).fold(b[o] as f64, |acc, (&wi, &xi)| acc + wi as f64 * xi as f64) as f32;
            out.push(if activate { z.tanh() } else { z });
        }
    }
    out
}

/// Gradients of one layer given its input, its (post-activation) output and
/// the gradient with respect to that output. Returns `(d params, d input)`.
pub fn layer_backward(
    params: &[f32],
    in_dim: usize,
    out_dim: usize,
    input: &[f32],
    output: &[f32],
    grad_out: &[f32],
    activate: bool,
) -> (Vec<f32>, Vec<f32>) {
    let w = &params[..in_dim * out_dim];
    let mut gw = vec![0.0f64; in_dim * out_dim];
    let mut gb = vec![0.0f64; out_dim];
    let mut gin = Vec::with_capacity(input.len());
    for ((x, y), gy) in input.chunks(in_dim).zip(output.chunks(out_dim)).zip(grad_out.chunks(out_dim)) {
        let dz: Vec<f64> = y
            .iter()
            .zip(gy)
            .map(|(&y, &g)| if activate { g as f64 * (1.0 - y as f64 * y as f64) } else { g as f64 })
            .collect();
        for o in 0..out_dim {
            gb[o] += dz[o];
            for i in 0..in_dim {
                gw[o * in_dim + i] += dz[o] * x[i] as f64;
            }
        }
        for i in 0..in_dim {
            gin.push((0..out_dim).map(|o| w[o * in_dim + i] as f64 * dz[o]).sum::<f64>() as f32);
        }
    }
    let grads = gw.into_iter().chain(gb).map(|g| g as f32).collect();
    (grads, gin)
}

/// Mean squared error and its gradient with respect to `output`.
pub fn mse(output: &[f32], targets: &[f32]) -> (f32, Vec<f32>) {
    let n = output.len() as f64;
    let loss = output.iter().zip(targets).map(|(&y, &t)| (y as f64 - t as f64).powi(2)).sum::<f64>() / n;
    let grad = output.iter().zip(targets).map(|(&y, &t)| (2.0 * (y as f64 - t as f64) / n) as f32).collect();
    (loss as f32, grad)
}

/// Host-side reference pass over full (unsharded) parameters.
pub fn forward_backward(dims: &[usize], params: &[Vec<f32>], batch: &Batch) -> (f32, Vec<Vec<f32>>) {
    let layers = params.len();
    let mut acts = vec![batch.inputs.clone()];
    for (l, p) in params.iter().enumerate() {
        let next = layer_forward(p, dims[l], dims[l + 1], &acts[l], l + 1 < layers);
        acts.push(next);
    }
    let (loss, mut g) = mse(&acts[layers], &batch.targets);
    let mut grads = vec![Vec::new(); layers];
    for l in (0..layers).rev() {
        let (gp, gin) = layer_backward(&params[l], dims[l], dims[l + 1], &acts[l], &acts[l + 1], &g, l + 1 < layers);
        grads[l] = gp;
        g = gin;
    }
    (loss, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `size x in_dim`
    pub inputs: Vec<f32>,
    /// `size x out_dim`
    pub targets: Vec<f32>,
}

/// Regression onto a hidden teacher of the same shape. Each rank owns a fixed
/// batch, so repeated steps are full-batch descent on the same data.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub dims: Vec<usize>,
    pub seed: u64,
    pub batch_size: usize,
    pub tokens_per_step: u64,
    /// Every rank sees rank 0's batch.
    pub shared_batch: bool,
    teacher: ToyModel,
}

impl SyntheticTask {
    pub fn new(dims: &[usize], seed: u64, batch_size: usize, tokens_per_step: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be > 0"));
        }
        let teacher = init_scaled(dims, stream_seed(seed, u64::MAX), 2.0)?;
        Ok(SyntheticTask { dims: dims.to_vec(), seed, batch_size, tokens_per_step, shared_batch: false, teacher })
    }

    pub fn teacher(&self) -> &ToyModel {
        &self.teacher
    }

    pub fn batch(&self, rank: usize) -> Batch {
        let rank = if self.shared_batch { 0 } else { rank };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, rank as u64));
        let inputs: Vec<f32> = (0..self.batch_size * self.dims[0]).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let targets = self.teacher.forward(&inputs);
        Batch { size: self.batch_size, inputs, targets }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state of one rank. Adam moments mirror the rank's primary shards.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub t: u64,
    /// `(m, v)` per primary shard; empty until the first Adam step.
    pub moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        OptimizerState { kind, lr, t: 0, moments: Vec::new() }
    }

    fn ensure_moments(&mut self, lens: impl Iterator<Item = usize>) {
        if matches!(self.kind, OptimizerKind::Adam { .. }) && self.moments.is_empty() {
            self.moments = lens.map(|n| (vec![0.0; n], vec![0.0; n])).collect();
        }
    }

    /// Updates every shard in place; elements at or past `valid[i]` are padding
    /// and stay untouched.
    pub fn step(&mut self, shards: &mut [Vec<f32>], grads: &[Vec<f32>], valid: &[usize]) -> Result<()> {
        if shards.len() != grads.len() || shards.len() != valid.len() {
            return Err(Error::InvalidArgument("one gradient and valid length per shard".into()));
        }
        for (i, (w, g)) in shards.iter().zip(grads).enumerate() {
            if w.len() != g.len() || valid[i] > w.len() {
                return Err(Error::InvalidArgument(format!("shard {i}: {} params vs {} grads", w.len(), g.len())));
            }
        }
        self.ensure_moments(shards.iter().map(Vec::len));
        if !self.moments.is_empty() && self.moments.len() != shards.len() {
            return Err(Error::InvalidArgument("moment buffers do not match shards".into()));
        }
        self.t += 1;
        for (i, (w, g)) in shards.iter_mut().zip(grads).enumerate() {
            let (m, v) = match self.moments.get_mut(i) {
                Some((m, v)) => (m.as_mut_slice(), v.as_mut_slice()),
                None => (&mut [][..], &mut [][..]),
            };
            apply_update(self.kind, self.lr, self.t, &mut w[..valid[i]], &g[..valid[i]], m, v);
        }
        Ok(())
    }
}

fn apply_update(kind: OptimizerKind, lr: f32, t: u64, w: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]) {
    match kind {
        OptimizerKind::Sgd => {
            for (w, &g) in w.iter_mut().zip(g) {
                *w -= lr * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let (b1, b2) = (beta1 as f64, beta2 as f64);
            let c1 = 1.0 - b1.powi(t as i32);
            let c2 = 1.0 - b2.powi(t as i32);
            for i in 0..w.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr as f64 * (mi / c1) / ((vi / c2).sqrt() + eps as f64);
                w[i] = (w[i] as f64 - update) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Verdict {
    Stable,
    /// First step with a non-finite loss.
    Nan { step: usize },
    /// No new minimum over the final `window` steps.
    Stagnant { window: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceVerdict {
    pub status: Verdict,
    pub losses: Vec<f64>,
}

impl DivergenceVerdict {
    pub fn is_stable(&self) -> bool {
        self.status == Verdict::Stable
    }
}

pub fn classify_divergence(losses: &[f64], window: usize) -> Result<DivergenceVerdict> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("empty loss series".into()));
    }
    let status = if let Some(step) = losses.iter().position(|l| !l.is_finite()) {
        Verdict::Nan { step }
    } else if window > 0 && losses.len() > window {
        let split = losses.len() - window;
        let before = losses[..split].iter().copied().fold(f64::INFINITY, f64::min);
        let recent = losses[split..].iter().copied().fold(f64::INFINITY, f64::min);
        if recent < before {
            Verdict::Stable
        } else {
            Verdict::Stagnant { window }
        }
    } else {
        Verdict::Stable
    };
    Ok(DivergenceVerdict { status, losses: losses.to_vec() })
}

#[derive(Debug, Default, Clone)]
struct RankBuffers {
    /// `acts[l]` is the input of layer `l`; `acts[L]` the model output.
    acts: Vec<Region>,
    /// Gradient with respect to `acts[l + 1]`, filled by the backward of `l + 1`.
    grad_out: Vec<Option<Region>>,
    targets: Option<Region>,
    loss: Option<Region>,
    moments: Vec<(BufferId, BufferId)>,
}

/// Real forward/backward/optimizer ops for one step on every rank. Build the
/// step program with it, run the program, then call [`TrainCompute::finish`].
pub struct TrainCompute<'a> {
    dims: &'a [usize],
    batches: &'a [Batch],
    optim: &'a mut [OptimizerState],
    ranks: Vec<RankBuffers>,
}

impl<'a> TrainCompute<'a> {
    pub fn new(dims: &'a [usize], batches: &'a [Batch], optim: &'a mut [OptimizerState]) -> Result<Self> {
        check_dims(dims)?;
        if batches.len() != optim.len() {
            return Err(Error::InvalidArgument("one batch and one optimizer state per rank".into()));
        }
        Ok(TrainCompute { dims, batches, optim, ranks: vec![RankBuffers::default(); batches.len()] })
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Per-rank losses of the step, and the optimizer state carried forward.
    pub fn finish(self, memory: &Memory) -> Vec<f32> {
        let mut losses = Vec::with_capacity(self.ranks.len());
        for (bufs, state) in self.ranks.iter().zip(self.optim.iter_mut()) {
            losses.push(bufs.loss.map_or(f32::NAN, |r| memory.read(r)[0]));
            state.t += 1;
            if !bufs.moments.is_empty() {
                state.moments = bufs.moments.iter().map(|&(m, v)| (memory.values(m).to_vec(), memory.values(v).to_vec())).collect();
            }
        }
        losses
    }
}

impl LayerCompute for TrainCompute<'_> {
    fn forward(&mut self, program: &mut Program, layer: usize, stream: StreamId, params: Region) -> Result<()> {
        let rank = stream.device.global;
        let (in_dim, out_dim) = (self.dims[layer], self.dims[layer + 1]);
        let batch = &self.batches[rank];
        let last = layer + 1 == self.layers();
        let mem = program.memory_mut();
        if layer == 0 {
            let input = mem.alloc_with(batch.inputs.clone(), format!("r{rank}.input"))?;
            let bufs = &mut self.ranks[rank];
            bufs.acts = vec![mem.whole(input)];
            bufs.grad_out = vec![None; self.dims.len() - 1];
        }
        let input = *self.ranks[rank].acts.get(layer).ok_or_else(|| Error::InvalidProgram("forward out of order".into()))?;
        let out_id = mem.alloc_uninitialized(batch.size * out_dim, format!("r{rank}.act{}", layer + 1))?;
        let output = mem.whole(out_id);
        self.ranks[rank].acts.push(output);

        let mut spec = OpSpec::compute(stream).reads([params, input]).writes([output]).tag(OpTag::new(OpRole::Forward, Some(layer)));
        if last {
            let targets = mem.alloc_with(batch.targets.clone(), format!("r{rank}.targets"))?;
            let targets = mem.whole(targets);
            let loss = mem.alloc_uninitialized(1, format!("r{rank}.loss"))?;
            let loss = mem.whole(loss);
            self.ranks[rank].targets = Some(targets);
            self.ranks[rank].loss = Some(loss);
            spec = spec.reads([targets]).writes([loss]).action(move |m: &mut Memory| {
                let y = layer_forward(m.read(params), in_dim, out_dim, m.read(input), false);
                let (l, _) = mse(&y, m.read(targets));
                m.write(output, &y);
                m.write(loss, &[l]);
            });
        } else {
            spec = spec.action(move |m: &mut Memory| {
                let y = layer_forward(m.read(params), in_dim, out_dim, m.read(input), true);
                m.write(output, &y);
            });
        }
        program.enqueue(spec)?;
        Ok(())
    }

    fn backward(&mut self, program: &mut Program, layer: usize, stream: StreamId, params: Region, grad: Region) -> Result<()> {
        let rank = stream.device.global;
        let (in_dim, out_dim) = (self.dims[layer], self.dims[layer + 1]);
        let last = layer + 1 == self.layers();
        let bufs = &self.ranks[rank];
        let missing = || Error::InvalidProgram(format!("backward of layer {layer} before its forward"));
        let input = *bufs.acts.get(layer).ok_or_else(missing)?;
        let output = *bufs.acts.get(layer + 1).ok_or_else(missing)?;
        // the last layer derives its output gradient from the targets
        let upstream = if last { bufs.targets.ok_or_else(missing)? } else { bufs.grad_out[layer].ok_or_else(missing)? };
        let grad_in = if layer > 0 {
            let mem = program.memory_mut();
            let id = mem.alloc_uninitialized(self.batches[rank].size * in_dim, format!("r{rank}.grad_act{layer}"))?;
            let r = mem.whole(id);
            self.ranks[rank].grad_out[layer - 1] = Some(r);
            Some(r)
        } else {
            None
        };
        let spec = OpSpec::compute(stream)
            .reads([params, input, output, upstream])
            .writes([grad].into_iter().chain(grad_in))
            .tag(OpTag::new(OpRole::Backward, Some(layer)))
            .action(move |m: &mut Memory| {
                let y = m.read(output);
                let gy = if last { mse(y, m.read(upstream)).1 } else { m.read(upstream).to_vec() };
                let (mut gp, gx) = layer_backward(m.read(params), in_dim, out_dim, m.read(input), y, &gy, !last);
                gp.resize(grad.len, 0.0);
                m.write(grad, &gp);
                if let Some(r) = grad_in {
                    m.write(r, &gx);
                }
            });
        program.enqueue(spec)?;
        Ok(())
    }

    fn optimizer_step(&mut self, program: &mut Program, stream: StreamId, shards: &[ShardRef]) -> Result<()> {
        let rank = stream.device.global;
        let state = &mut self.optim[rank];
        state.ensure_moments(shards.iter().map(|s| s.primary.len));
        if !state.moments.is_empty() && state.moments.len() != shards.len() {
            return Err(Error::InvalidArgument("moment buffers do not match shards".into()));
        }
        let mem = program.memory_mut();
        let mut moments = Vec::new();
        for (i, (m, v)) in state.moments.iter().enumerate() {
            let mid = mem.alloc_with(m.clone(), format!("r{rank}.adam_m{i}"))?;
            let vid = mem.alloc_with(v.clone(), format!("r{rank}.adam_v{i}"))?;
            moments.push((mid, vid));
        }
        let moment_regions: Vec<(Region, Region)> = moments.iter().map(|&(m, v)| (mem.whole(m), mem.whole(v))).collect();
        self.ranks[rank].moments = moments;

        let (kind, lr, t) = (state.kind, state.lr, state.t + 1);
        let shards = shards.to_vec();
        let regions = moment_regions.clone();
        let reads = shards.iter().flat_map(|s| [s.primary, s.grad]).chain(moment_regions.iter().flat_map(|&(m, v)| [m, v]));
        let writes = shards.iter().map(|s| s.primary).chain(moment_regions.iter().flat_map(|&(m, v)| [m, v]));
        let spec = OpSpec::compute(stream)
            .reads(reads.collect::<Vec<_>>())
            .writes(writes.collect::<Vec<_>>())
            .tag(OpTag::new(OpRole::OptimizerStep, None))
            .action(move |mem: &mut Memory| {
                for (i, s) in shards.iter().enumerate() {
                    let mut w = mem.read(s.primary).to_vec();
                    let g = mem.read(s.grad).to_vec();
                    let (mut m, mut v) = match regions.get(i) {
                        Some(&(m, v)) => (mem.read(m).to_vec(), mem.read(v).to_vec()),
                        None => (Vec::new(), Vec::new()),
                    };
                    let n = s.valid;
                    let (mm, vv) = if m.is_empty() { (&mut m[..], &mut v[..]) } else { (&mut m[..n], &mut v[..n]) };
                    apply_update(kind, lr, t, &mut w[..n], &g[..n], mm, vv);
                    mem.write(s.primary, &w);
                    if let Some(&(mr, vr)) = regions.get(i) {
                        mem.write(mr, &m);
                        mem.write(vr, &v);
                    }
                }
            });
        program.enqueue(spec)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let a = init_model(&[4, 8, 2], 1).unwrap();
        assert_eq!(a.param_count(), 58);
        assert_eq!(a, init_model(&[4, 8, 2], 1).unwrap());
        assert_ne!(a.params, init_model(&[4, 8, 2], 2).unwrap().params);
        let bound = 1.0 / 2.0;
        assert!(a.params[0][..32].iter().all(|w| w.abs() <= bound));
        assert!(init_model(&[4], 0).is_err());
    }

    #[test]
    fn zero_model_zero_targets() {
        let dims = [3, 4, 2];
        let params = vec![vec![0.0; 16], vec![0.0; 10]];
        let batch = Batch { size: 2, inputs: vec![0.5; 6], targets: vec![0.0; 4] };
        let (loss, grads) = forward_backward(&dims, &params, &batch);
        assert_eq!(loss, 0.0);
        assert!(grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn scalar_linear_layer() {
        // y = 2x, x = 1, t = 0: loss 4, dL/dw = 2 (y - t) x = 4, dL/db = 4
        let batch = Batch { size: 1, inputs: vec![1.0], targets: vec![0.0] };
        let (loss, grads) = forward_backward(&[1, 1], &[vec![2.0, 0.0]], &batch);
        assert_eq!(loss, 4.0);
        assert_eq!(grads[0], vec![4.0, 4.0]);
    }

    fn loss_f64(dims: &[usize], params: &[Vec<f64>], batch: &Batch) -> f64 {
        let layers = params.len();
        let mut h: Vec<f64> = batch.inputs.iter().map(|&x| x as f64).collect();
        for (l, p) in params.iter().enumerate() {
            let (i, o) = (dims[l], dims[l + 1]);
            h = h
                .chunks(i)
                .flat_map(|x| {
                    (0..o).map(move |k| {
                        let z = p[i * o + k] + (0..i).map(|j| p[k * i + j] * x[j]).sum::<f64>();
                        if l + 1 < layers { z.tanh() } else { z }
                    })
                })
                .collect();
        }
        h.iter().zip(&batch.targets).map(|(y, &t)| (y - t as f64).powi(2)).sum::<f64>() / h.len() as f64
    }

    #[test]
    fn gradients_match_central_differences() {
        let dims = [3, 5, 4, 2];
        for seed in 0..4 {
            let task = SyntheticTask::new(&dims, seed, 6, 0).unwrap();
            let model = init_model(&dims, seed + 100).unwrap();
            let batch = task.batch(0);
            let (_, grads) = forward_backward(&dims, &model.params, &batch);
            let mut p64: Vec<Vec<f64>> = model.params.iter().map(|l| l.iter().map(|&v| v as f64).collect()).collect();
            let h = 1e-6;
            for l in 0..p64.len() {
                for i in 0..p64[l].len() {
                    let orig = p64[l][i];
                    p64[l][i] = orig + h;
                    let up = loss_f64(&dims, &p64, &batch);
                    p64[l][i] = orig - h;
                    let down = loss_f64(&dims, &p64, &batch);
                    p64[l][i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let g = grads[l][i] as f64;
                    let err = (g - fd).abs() / fd.abs().max(1e-3);
                    assert!(err < 1e-4, "seed {seed} layer {l} elem {i}: {g} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn nan_params_poison_loss() {
        let dims = [2, 3, 1];
        let mut model = init_model(&dims, 0).unwrap();
        model.params[0][4] = f32::NAN;
        let batch = SyntheticTask::new(&dims, 0, 4, 0).unwrap().batch(0);
        let (loss, grads) = forward_backward(&dims, &model.params, &batch);
        assert!(loss.is_nan());
        assert!(grads[1].iter().any(|g| g.is_nan()));
    }

    #[test]
    fn sgd_updates() {
        let mut s = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        let mut w = vec![vec![1.0, 0.0]];
        s.step(&mut w, &[vec![2.0, 5.0]], &[1]).unwrap();
        assert!((w[0][0] - 0.8).abs() < 1e-7);
        assert_eq!(w[0][1], 0.0, "padding untouched");
        let mut z = OptimizerState::new(OptimizerKind::Sgd, 0.0);
        let before = w.clone();
        z.step(&mut w, &[vec![3.0, 3.0]], &[2]).unwrap();
        assert_eq!(w, before);
        assert!(matches!(s.step(&mut w, &[vec![1.0]], &[1]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for g in [1e-4f32, 1.0, 1e3] {
            let mut s = OptimizerState::new(OptimizerKind::adam(), 0.01);
            let mut w = vec![vec![0.5; 4]];
            s.step(&mut w, &[vec![g; 4]], &[4]).unwrap();
            // m̂ = g, v̂ = g², update = lr g / (|g| + eps)
            let expect = 0.01 * g as f64 / (g as f64 + 1e-8);
            for &x in &w[0] {
                assert!(((0.5 - x as f64) - expect).abs() < 1e-6, "g={g}");
            }
            assert_eq!(s.moments[0].0.len(), 4);
        }
    }

    #[test]
    fn verdicts() {
        let v = |l: &[f64], w| classify_divergence(l, w).unwrap().status;
        assert_eq!(v(&[1.0, 0.9, 0.8], 2), Verdict::Stable);
        assert_eq!(v(&[1.0, f64::NAN], 2), Verdict::Nan { step: 1 });
        assert_eq!(v(&[1.0, 1.0, 1.0, 1.0], 3), Verdict::Stagnant { window: 3 });
        assert_eq!(v(&[1.0, 0.5, 0.6, 0.7], 2), Verdict::Stagnant { window: 2 });
        assert!(classify_divergence(&[], 3).is_err());
    }

    #[test]
    fn shared_batches_are_identical() {
        let mut t = SyntheticTask::new(&[3, 2], 5, 4, 0).unwrap();
        assert_ne!(t.batch(0), t.batch(1));
        t.shared_batch = true;
        assert_eq!(t.batch(0), t.batch(3));
    }
}
