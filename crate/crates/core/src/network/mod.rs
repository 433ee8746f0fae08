//! Residual MLP family with weight-shared sub-networks.
//!
//! A network is a sequence of stages. The first block of every stage is a
//! transition block `h -> act(bn(h W + b))` that changes width and is never
//! skipped; the remaining blocks are residual, `h -> h + act(bn(h W + b))`.
//! Sub-networks, destroyed networks and stochastic-depth networks are all
//! expressed as a [`Route`] through the same parameter storage.

mod mask;
mod route;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use mask::{
    enumerate_ordered, ordered_space_size, raw_space_size, sample_ordered, sample_stochastic,
    stochastic_space_size, BlockSubset, SubnetMask, DEFAULT_ENUMERATION_CAP,
};
pub use route::{Route, Step};

/// Momentum of the running-statistics update of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Hswish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub num_blocks: usize,
    pub width: usize,
}

/// Architecture description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub stages: Vec<StageSpec>,
    pub activation: Activation,
}

impl NetworkSpec {
    /// Spec with the given block counts, all stages of width `width`.
    pub fn uniform(input_dim: usize, num_classes: usize, blocks: &[usize], width: usize) -> Self {
        NetworkSpec {
            input_dim,
            num_classes,
            stages: blocks
                .iter()
                .map(|&num_blocks| StageSpec { num_blocks, width })
                .collect(),
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Validation("input_dim must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Validation("network needs at least one stage".into()));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.num_blocks == 0 {
                return Err(Error::Validation(format!("stage {s} has no blocks")));
            }
            if st.width == 0 {
                return Err(Error::Validation(format!("stage {s} has zero width")));
            }
        }
        Ok(())
    }

    pub fn blocks_per_stage(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.num_blocks).collect()
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.num_blocks).sum()
    }

    /// Index of the first block of each stage (0-based block indices).
    pub fn stage_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.stages.len());
        let mut acc = 0;
        for st in &self.stages {
            starts.push(acc);
            acc += st.num_blocks;
        }
        starts
    }

    /// Stage that owns block `b`.
    pub fn stage_of(&self, b: usize) -> usize {
        let mut acc = 0;
        for (s, st) in self.stages.iter().enumerate() {
            acc += st.num_blocks;
            if b < acc {
                return s;
            }
        }
        panic!("block {b} out of range for {} blocks", acc)
    }

    pub fn is_transition(&self, b: usize) -> bool {
        self.stage_starts().contains(&b)
    }

    /// Input and output width of block `b`.
    pub fn block_dims(&self, b: usize) -> (usize, usize) {
        let s = self.stage_of(b);
        let out = self.stages[s].width;
        if self.is_transition(b) {
            let inp = if s == 0 {
                self.input_dim
            } else {
                self.stages[s - 1].width
            };
            (inp, out)
        } else {
            (out, out)
        }
    }

    /// Width fed to the classifier head.
    pub fn feature_width(&self) -> usize {
        self.stages.last().map_or(self.input_dim, |s| s.width)
    }

    /// Spec of the network physically truncated to `kept` blocks per stage.
    pub fn truncated(&self, kept: &[usize]) -> NetworkSpec {
        NetworkSpec {
            stages: self
                .stages
                .iter()
                .zip(kept)
                .map(|(st, &k)| StageSpec {
                    num_blocks: k,
                    width: st.width,
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for b in 0..self.total_blocks() {
            let (i, o) = self.block_dims(b);
            n += i * o + 3 * o;
        }
        n + self.feature_width() * self.num_classes + self.num_classes
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let blocks: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}x{}", s.num_blocks, s.width))
            .collect();
        write!(
            f,
            "in={} classes={} stages=[{}] act={:?}",
            self.input_dim,
            self.num_classes,
            blocks.join(","),
            self.activation
        )
    }
}

/// Learnable parameters of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running statistics for every block, indexed like the blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub layers: Vec<LayerStats>,
}

impl NormStats {
    fn fresh(spec: &NetworkSpec) -> Self {
        NormStats {
            layers: (0..spec.total_blocks())
                .map(|b| {
                    let w = spec.block_dims(b).1;
                    LayerStats {
                        mean: vec![0.0; w],
                        var: vec![1.0; w],
                    }
                })
                .collect(),
        }
    }

    /// Exponential running update from the batch moments of a forward pass.
    pub fn update(&mut self, moments: &[(usize, BatchMoments)], momentum: f64) {
        for (b, m) in moments {
            let layer = &mut self.layers[*b];
            for (r, v) in layer.mean.iter_mut().zip(&m.mean) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
            for (r, v) in layer.var.iter_mut().zip(&m.var) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Role of a parameter tensor, used to exclude norm parameters from decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

/// A residual network: parameters, running statistics and its spec.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualNet {
    spec: NetworkSpec,
    seed: u64,
    blocks: Vec<Block>,
    head_weight: Tensor,
    head_bias: Tensor,
    stats: NormStats,
    version: u64,
}

/// Tape handles of every parameter, in declaration order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    blocks: Vec<[Var; 4]>,
    head: [Var; 2],
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        self.blocks
            .iter()
            .flatten()
            .chain(self.head.iter())
            .copied()
            .collect()
    }

    /// Weight, bias, norm scale and norm shift of block `b`.
    pub fn block(&self, b: usize) -> [Var; 4] {
        self.blocks[b]
    }
}

/// Output of a recorded forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Batch moments of every normalization layer that ran (train mode only).
    pub moments: Vec<(usize, BatchMoments)>,
}

fn he_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let values = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], values)
        .expect("sized by construction")
        .with_requires_grad(true)
}

fn param(shape: usize, value: f64) -> Tensor {
    Tensor::filled(vec![shape], value).with_requires_grad(true)
}

impl ResidualNet {
    /// Deterministic He-style initialization.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..spec.total_blocks())
            .map(|b| {
                let (i, o) = spec.block_dims(b);
                Block {
                    weight: he_init(&mut rng, i, o),
                    bias: param(o, 0.0),
                    gamma: param(o, 1.0),
                    beta: param(o, 0.0),
                }
            })
            .collect();
        let fw = spec.feature_width();
        let head_weight = he_init(&mut rng, fw, spec.num_classes);
        let head_bias = param(spec.num_classes, 0.0);
        Ok(ResidualNet {
            spec: spec.clone(),
            seed,
            blocks,
            head_weight,
            head_bias,
            stats: NormStats::fresh(spec),
            version: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut NormStats {
        &mut self.stats
    }

    /// Number of parameter writes performed by the optimizer so far.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn params(&self) -> Vec<(ParamKind, &Tensor)> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.push((ParamKind::Weight, &b.weight));
            out.push((ParamKind::Bias, &b.bias));
            out.push((ParamKind::NormScale, &b.gamma));
            out.push((ParamKind::NormShift, &b.beta));
        }
        out.push((ParamKind::Weight, &self.head_weight));
        out.push((ParamKind::Bias, &self.head_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Tensor)> {
        let mut out = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push((ParamKind::Weight, &mut b.weight));
            out.push((ParamKind::Bias, &mut b.bias));
            out.push((ParamKind::NormScale, &mut b.gamma));
            out.push((ParamKind::NormShift, &mut b.beta));
        }
        out.push((ParamKind::Weight, &mut self.head_weight));
        out.push((ParamKind::Bias, &mut self.head_bias));
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        self.bind_with(tape, false)
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_constant(&self, tape: &mut Tape) -> ParamVars {
        self.bind_with(tape, true)
    }

    fn bind_with(&self, tape: &mut Tape, constant: bool) -> ParamVars {
        let mut put = |t: &Tensor| {
            if constant {
                tape.constant(t)
            } else {
                tape.leaf(t)
            }
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| [put(&b.weight), put(&b.bias), put(&b.gamma), put(&b.beta)])
            .collect();
        let head = [put(&self.head_weight), put(&self.head_bias)];
        ParamVars { blocks, head }
    }

    /// Adds gradients from `grads` into every parameter's grad buffer.
    pub fn accumulate_grads(&mut self, vars: &ParamVars, grads: &Gradients) -> Result<()> {
        let handles = vars.all();
        for ((_, p), v) in self.params_mut().into_iter().zip(handles) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }

    /// Records a forward pass along `route`.
    ///
    /// In [`Mode::Eval`] the normalization layers use `stats`; in
    /// [`Mode::Train`] they use batch statistics and the moments are
    /// returned without touching any stored statistics.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        route: &Route,
        mode: Mode,
        stats: &NormStats,
    ) -> Result<ForwardTrace> {
        route.validate(&self.spec)?;
        match tape.shape(x) {
            [_, d] if *d == self.spec.input_dim => {}
            other => {
                return Err(Error::Dimension(format!(
                    "input of shape {other:?}, network expects {} features",
                    self.spec.input_dim
                )))
            }
        }
        let mut moments = Vec::new();
        let mut h = x;
        for step in route.steps() {
            let [w, b, g, beta] = vars.blocks[step.block];
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            let z = match mode {
                Mode::Train => {
                    let (z, m) = tape.batch_norm_train(z, g, beta)?;
                    moments.push((step.block, m));
                    z
                }
                Mode::Eval => {
                    let ls = &stats.layers[step.block];
                    tape.batch_norm_eval(z, g, beta, &ls.mean, &ls.var)?
                }
            };
            let f = match self.spec.activation {
                Activation::Relu => tape.relu(z),
                Activation::Hswish => tape.hswish(z),
            };
            h = if self.spec.is_transition(step.block) {
                f
            } else {
                let f = if step.branch_scale == 1.0 {
                    f
                } else {
                    tape.scale(f, step.branch_scale)
                };
                tape.add(h, f)?
            };
        }
        let [hw, hb] = vars.head;
        let z = tape.matmul(h, hw)?;
        let logits = tape.add_bias(z, hb)?;
        Ok(ForwardTrace { logits, moments })
    }

    /// Logits of the sub-network `mask` using this network's own statistics.
    pub fn forward(&self, mask: &SubnetMask, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let route = mask.route(&self.spec)?;
        self.forward_route(&route, x, mode, &self.stats)
    }

    /// Logits along an arbitrary route with the given statistics.
    pub fn forward_route(
        &self,
        route: &Route,
        x: &Tensor,
        mode: Mode,
        stats: &NormStats,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_constant(&mut tape);
        let xv = tape.constant(x);
        let trace = self.forward_on(&mut tape, &vars, xv, route, mode, stats)?;
        Ok(tape.tensor(trace.logits))
    }

    /// A standalone network containing only the blocks kept by `mask`,
    /// with copies of their parameters and statistics.
    pub fn extract(&self, mask: &SubnetMask) -> Result<ResidualNet> {
        mask.validate(&self.spec)?;
        let spec = self.spec.truncated(mask.kept());
        let starts = self.spec.stage_starts();
        let mut blocks = Vec::new();
        let mut layers = Vec::new();
        for (s, &k) in mask.kept().iter().enumerate() {
            for b in starts[s]..starts[s] + k {
                blocks.push(self.blocks[b].clone());
                layers.push(self.stats.layers[b].clone());
            }
        }
        Ok(ResidualNet {
            spec,
            seed: self.seed,
            blocks,
            head_weight: self.head_weight.clone(),
            head_bias: self.head_bias.clone(),
            stats: NormStats { layers },
            version: self.version,
        })
    }

    /// Flat parameter values followed by running statistics, in
    /// declaration order.
    pub fn flat_state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, p) in self.params() {
            out.extend_from_slice(p.values());
        }
        for l in &self.stats.layers {
            out.extend_from_slice(&l.mean);
            out.extend_from_slice(&l.var);
        }
        out
    }

    /// Length of [`ResidualNet::flat_state`] for `spec`.
    pub fn flat_state_len(spec: &NetworkSpec) -> usize {
        let stats: usize = (0..spec.total_blocks())
            .map(|b| 2 * spec.block_dims(b).1)
            .sum();
        spec.parameter_count() + stats
    }

    /// Rebuilds a network from [`ResidualNet::flat_state`] output.
    pub fn from_flat_state(spec: &NetworkSpec, seed: u64, flat: &[f64]) -> Result<ResidualNet> {
        spec.validate()?;
        let expected = Self::flat_state_len(spec);
        if flat.len() != expected {
            return Err(Error::Dimension(format!(
                "flat state of length {}, spec needs {expected}",
                flat.len()
            )));
        }
        let mut net = ResidualNet::build(spec, seed)?;
        let mut cursor = 0;
        for (_, p) in net.params_mut() {
            let n = p.len();
            p.values_mut().copy_from_slice(&flat[cursor..cursor + n]);
            cursor += n;
        }
        for l in &mut net.stats.layers {
            let n = l.mean.len();
            l.mean.copy_from_slice(&flat[cursor..cursor + n]);
            cursor += n;
            l.var.copy_from_slice(&flat[cursor..cursor + n]);
            cursor += n;
        }
        if let Some((b, _)) = net
            .stats
            .layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.var.iter().any(|v| !(*v > 0.0)))
        {
            return Err(Error::Validation(format!(
                "running variance of block {b} is not positive"
            )));
        }
        Ok(net)
    }
}
