//! Training loops: common, stimulative (main CE plus KL from the main
//! network to one sampled sub-network), individual and stochastic depth.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::loss;
use crate::network::{
    sample_ordered, sample_stochastic, BlockSubset, Mode, NetworkSpec, ResidualNet, Route,
    SubnetMask, BN_MOMENTUM,
};
use crate::tensor::Tensor;

/// Stream ids for the independent RNG streams derived from a run seed.
/// Network initialization uses stream 0 through [`ResidualNet::build`].
const SHUFFLE_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Ordered,
    Stochastic,
    None,
}

/// Optimizer, schedule and sampling settings.
///
/// Weight decay applies to affine weights and biases only; batch-norm
/// scale and shift are never decayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub sampling: Sampling,
    /// Per-block keep probability for [`Sampling::Stochastic`].
    pub stochastic_keep_prob: f64,
    /// Survival probability of the deepest block under stochastic depth.
    pub stochastic_depth_final_p: f64,
    pub seed: u64,
    /// Epoch interval between checkpoints written by run drivers; 0 writes
    /// only the final one. Does not affect training.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr0: 0.05,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay: 3e-5,
            lambda: 10.0,
            sampling: Sampling::Ordered,
            stochastic_keep_prob: 0.5,
            stochastic_depth_final_p: 0.9,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: String| {
            Err(Error::Validation(format!(
                "train.{what} = {v} is out of range"
            )))
        };
        if self.batch_size < 2 {
            return bad("batch_size", self.batch_size.to_string());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("lr0", self.lr0.to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", self.momentum.to_string());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", self.weight_decay.to_string());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda.to_string());
        }
        if !(self.stochastic_keep_prob > 0.0 && self.stochastic_keep_prob <= 1.0) {
            return bad(
                "stochastic_keep_prob",
                self.stochastic_keep_prob.to_string(),
            );
        }
        if !(self.stochastic_depth_final_p > 0.0 && self.stochastic_depth_final_p <= 1.0) {
            return bad(
                "stochastic_depth_final_p",
                self.stochastic_depth_final_p.to_string(),
            );
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr0,
            Schedule::Cosine => {
                let t = iteration as f64 / total.max(1) as f64;
                self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// One optimizer step worth of measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_main_ce: f64,
    pub loss_kl: f64,
    pub loss_total: f64,
    pub lr: f64,
    /// `"full"`, `"ordered"` (kept blocks per stage) or `"subset"` (0/1 per block).
    pub mask_kind: String,
    pub mask: Vec<usize>,
    /// Seconds since the start of the run. Not serialized: the metrics
    /// stream is a pure function of seed, config and data.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Snapshot handed to the epoch observer.
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub net: &'a ResidualNet,
    pub metrics: &'a [MetricsRecord],
}

pub type Observer<'a> = dyn FnMut(EpochEnd<'_>) -> Result<()> + 'a;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRecord>,
}

/// SGD with a velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v = momentum * v + (g + wd * w)`, `w = w - lr * v`, then clears
    /// the gradients. Fails without touching anything if any parameter
    /// lacks a gradient.
    pub fn step(&mut self, net: &mut ResidualNet, lr: f64) -> Result<()> {
        if let Some(i) = net.params().iter().position(|(_, p)| p.grad().is_none()) {
            return Err(Error::State(format!(
                "parameter {i} has no gradient; run backward first"
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = net
                .params()
                .iter()
                .map(|(_, p)| vec![0.0; p.len()])
                .collect();
        }
        let (momentum, wd) = (self.momentum, self.weight_decay);
        for ((kind, p), vel) in net.params_mut().into_iter().zip(&mut self.velocity) {
            let decay = if kind.is_norm() { 0.0 } else { wd };
            let grad = p.grad().expect("checked above").to_vec();
            for ((w, g), v) in p.values_mut().iter_mut().zip(&grad).zip(vel.iter_mut()) {
                *v = momentum * *v + (g + decay * *w);
                *w -= lr * *v;
            }
            p.zero_grad();
        }
        net.bump_version();
        Ok(())
    }
}

/// One-shot form of [`Sgd::step`] without persistent velocity.
pub fn sgd_step(net: &mut ResidualNet, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    Sgd::new(momentum, weight_decay).step(net, lr)
}

/// Survival probability of each block under linearly decaying stochastic
/// depth: `1 - (l / L) * (1 - final_p)` for the block at global position
/// `l` of `L`; transition blocks always survive.
pub fn survival_probabilities(spec: &NetworkSpec, final_p: f64) -> Vec<f64> {
    let total = spec.total_blocks() as f64;
    (0..spec.total_blocks())
        .map(|b| {
            if spec.is_transition(b) {
                1.0
            } else {
                1.0 - (b + 1) as f64 / total * (1.0 - final_p)
            }
        })
        .collect()
}

/// Eval-time route of a stochastic-depth network: every block, with the
/// residual branch scaled by its survival probability.
pub fn stochastic_depth_eval_route(spec: &NetworkSpec, final_p: f64) -> Route {
    let p = survival_probabilities(spec, final_p);
    Route::full(spec).with_branch_scale(|b| p[b])
}

fn sample_survivors<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    probs: &[f64],
    rng: &mut R,
) -> Result<BlockSubset> {
    let keep = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
    BlockSubset::new(spec, keep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Regime {
    Common,
    Stimulative,
    StochasticDepth,
}

enum Drawn {
    Ordered(SubnetMask),
    Subset(BlockSubset),
}

impl Drawn {
    fn route(&self, spec: &NetworkSpec) -> Result<Route> {
        match self {
            Drawn::Ordered(m) => m.route(spec),
            Drawn::Subset(s) => Ok(s.route()),
        }
    }

    fn describe(&self) -> (String, Vec<usize>) {
        match self {
            Drawn::Ordered(m) => ("ordered".into(), m.kept().to_vec()),
            Drawn::Subset(s) => (
                "subset".into(),
                s.keep().iter().map(|&k| k as usize).collect(),
            ),
        }
    }
}

fn diverged(record: &MetricsRecord) -> Error {
    // JSON has no NaN; the debug form keeps every field readable
    Error::Diverged(format!("{record:?}"))
}

fn train_loop(
    net: &mut ResidualNet,
    data: &SplitData,
    cfg: &TrainConfig,
    regime: Regime,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.x.shape()[1] != net.spec().input_dim {
        return Err(Error::Dimension(format!(
            "data has {} features, network expects {}",
            data.x.shape()[1],
            net.spec().input_dim
        )));
    }
    if data.len() < 2 {
        return Err(Error::Validation(
            "training split needs at least 2 rows".into(),
        ));
    }
    let spec = net.spec().clone();
    let classes = spec.num_classes;
    let mut shuffle_rng = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut mask_rng = stream_rng(cfg.seed, MASK_STREAM);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let full_route = Route::full(&spec);
    let survival = survival_probabilities(&spec, cfg.stochastic_depth_final_p);

    let bs = cfg.batch_size;
    let batches_per_epoch = data.len() / bs + usize::from(data.len() % bs >= 2);
    let total_iters = batches_per_epoch * cfg.epochs;
    let started = Instant::now();
    let mut report = TrainReport::default();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks(bs) {
            if idx.len() < 2 {
                continue;
            }
            let batch = data.rows(idx)?;
            let labels = Tensor::one_hot(&batch.y, classes)?;
            let lr = cfg.learning_rate(step, total_iters);

            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let x = tape.constant(&batch.x);

            let (main_route, drawn_main) = match regime {
                Regime::StochasticDepth => {
                    let s = sample_survivors(&spec, &survival, &mut mask_rng)?;
                    (s.route(), Some(Drawn::Subset(s)))
                }
                _ => (full_route.clone(), None),
            };
            let main =
                net.forward_on(&mut tape, &vars, x, &main_route, Mode::Train, net.stats())?;
            if tape.value(main.logits).iter().any(|v| !v.is_finite()) {
                let (mask_kind, mask) = drawn_main.as_ref().map_or_else(
                    || ("full".to_string(), spec.blocks_per_stage()),
                    Drawn::describe,
                );
                return Err(diverged(&MetricsRecord {
                    epoch,
                    step,
                    loss_main_ce: f64::NAN,
                    loss_kl: f64::NAN,
                    loss_total: f64::NAN,
                    lr,
                    mask_kind,
                    mask,
                    wall_time: started.elapsed().as_secs_f64(),
                }));
            }
            let ce = tape.cross_entropy(main.logits, &labels)?;

            let mut drawn = drawn_main;
            let (loss, kl_value) =
                if regime == Regime::Stimulative && cfg.sampling != Sampling::None {
                    let sub = match cfg.sampling {
                        Sampling::Ordered => Drawn::Ordered(sample_ordered(&spec, &mut mask_rng)),
                        Sampling::Stochastic => Drawn::Subset(sample_stochastic(
                            &spec,
                            &mut mask_rng,
                            cfg.stochastic_keep_prob,
                        )?),
                        Sampling::None => unreachable!(),
                    };
                    let teacher = loss::softmax(&tape.tensor(main.logits))?;
                    let sub_route = sub.route(&spec)?;
                    let sub_trace =
                        net.forward_on(&mut tape, &vars, x, &sub_route, Mode::Train, net.stats())?;
                    let probs = tape.softmax(sub_trace.logits)?;
                    let kl = tape.kl_divergence(&teacher, probs)?;
                    let weighted = tape.scale(kl, cfg.lambda);
                    let total = tape.add(ce, weighted)?;
                    drawn = Some(sub);
                    (total, tape.value(kl)[0])
                } else {
                    (ce, 0.0)
                };

            let (mask_kind, mask) = drawn.as_ref().map_or_else(
                || ("full".to_string(), spec.blocks_per_stage()),
                Drawn::describe,
            );
            let record = MetricsRecord {
                epoch,
                step,
                loss_main_ce: tape.value(ce)[0],
                loss_kl: kl_value,
                loss_total: tape.value(loss)[0],
                lr,
                mask_kind,
                mask,
                wall_time: started.elapsed().as_secs_f64(),
            };
            if !record.loss_total.is_finite() {
                return Err(diverged(&record));
            }

            let grads = tape.backward(loss)?;
            net.accumulate_grads(&vars, &grads)?;
            sgd.step(net, lr)?;
            net.stats_mut().update(&main.moments, BN_MOMENTUM);
            report.metrics.push(record);
            step += 1;
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(EpochEnd {
                epoch,
                net,
                metrics: &report.metrics,
            })?;
        }
    }
    Ok(report)
}

/// Cross entropy on the main network only.
pub fn train_common(
    net: &mut ResidualNet,
    data: &SplitData,
    cfg: &TrainConfig,
    observer: Option<&mut Observer<'_>>,
) -> Result<TrainReport> {
    train_loop(net, data, cfg, Regime::Common, observer)
}

/// Main-network cross entropy plus `lambda` times the KL divergence from
/// the (detached) main-network distribution to one sampled sub-network,
/// with a single backward pass and a single parameter update per batch.
pub fn train_stimulative(
    net: &mut ResidualNet,
    data: &SplitData,
    cfg: &TrainConfig,
    observer: Option<&mut Observer<'_>>,
) -> Result<TrainReport> {
    train_loop(net, data, cfg, Regime::Stimulative, observer)
}

/// Linearly decaying stochastic depth with cross entropy only.
pub fn train_stochastic_depth(
    net: &mut ResidualNet,
    data: &SplitData,
    cfg: &TrainConfig,
    observer: Option<&mut Observer<'_>>,
) -> Result<TrainReport> {
    train_loop(net, data, cfg, Regime::StochasticDepth, observer)
}

/// Trains a fresh network physically truncated to `mask` with common
/// training. Initialization uses `cfg.seed`.
pub fn train_individual(
    spec: &NetworkSpec,
    mask: &SubnetMask,
    data: &SplitData,
    cfg: &TrainConfig,
) -> Result<(ResidualNet, TrainReport)> {
    mask.validate(spec)?;
    let mut net = ResidualNet::build(&spec.truncated(mask.kept()), cfg.seed)?;
    let report = train_common(&mut net, data, cfg, None)?;
    Ok((net, report))
}

/// Serializes records as one JSON object per line.
pub fn metrics_to_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}
