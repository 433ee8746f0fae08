//! Sub-network evaluation: batch-norm re-calibration, accuracy sweeps over
//! the ordered space, loafing gaps, KL tracking and the CE-gap bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::loss;
use crate::network::{
    enumerate_ordered, Mode, NormStats, ResidualNet, Route, SubnetMask, DEFAULT_ENUMERATION_CAP,
};
use crate::tensor::Tensor;
use crate::training::{train_individual, TrainConfig};

/// Lower bound on re-calibrated running variances.
pub const VAR_FLOOR: f64 = 1e-8;

/// Evaluation protocol knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Calibration batches per re-calibration.
    pub calib_batches: usize,
    pub batch_size: usize,
    pub recalibrate: bool,
    /// Upper bound on the number of enumerated masks.
    pub cap: usize,
    /// Rows of the held-out split used as the KL probe set.
    pub probe_size: usize,
    /// Seed of the calibration-row shuffle.
    pub calib_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            calib_batches: 8,
            batch_size: 64,
            recalibrate: true,
            cap: DEFAULT_ENUMERATION_CAP,
            probe_size: 512,
            calib_seed: 0,
        }
    }
}

/// Running statistics for `route` estimated from calibration batches.
///
/// The calibration rows are shuffled with `opts.calib_seed` and cut into
/// batches. Each active normalization layer gets the batch-size-weighted
/// average of its per-batch means and (biased) variances under a train-mode
/// masked forward. Layers not on the route keep the network's own
/// statistics; the network itself is never modified.
pub fn bn_recalibrate(
    net: &ResidualNet,
    route: &Route,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<NormStats> {
    if calib.is_empty() || opts.calib_batches == 0 {
        return Err(Error::Validation(
            "batch-norm re-calibration needs at least one calibration batch".into(),
        ));
    }
    let batches: Vec<SplitData> = calib
        .shuffled(opts.calib_seed)?
        .chunks(opts.batch_size)?
        .into_iter()
        .filter(|b| b.len() >= 2 || calib.len() < 2)
        .take(opts.calib_batches)
        .collect();
    let mut overlay = net.stats().clone();
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; overlay.layers.len()];
    let mut rows = 0.0;
    for batch in &batches {
        let mut tape = Tape::new();
        let vars = net.bind_constant(&mut tape);
        let x = tape.constant(&batch.x);
        let trace = net.forward_on(&mut tape, &vars, x, route, Mode::Train, net.stats())?;
        let w = batch.len() as f64;
        rows += w;
        for (b, m) in trace.moments {
            let slot =
                sums[b].get_or_insert_with(|| (vec![0.0; m.mean.len()], vec![0.0; m.var.len()]));
            slot.0
                .iter_mut()
                .zip(&m.mean)
                .for_each(|(a, v)| *a += w * v);
            slot.1.iter_mut().zip(&m.var).for_each(|(a, v)| *a += w * v);
        }
    }
    for (b, slot) in sums.into_iter().enumerate() {
        if let Some((mean, var)) = slot {
            overlay.layers[b].mean = mean.into_iter().map(|v| v / rows).collect();
            overlay.layers[b].var = var.into_iter().map(|v| (v / rows).max(VAR_FLOOR)).collect();
        }
    }
    Ok(overlay)
}

/// Eval-mode logits for every row of `data`, computed in chunks.
pub fn logits(
    net: &ResidualNet,
    route: &Route,
    stats: &NormStats,
    data: &SplitData,
    batch_size: usize,
) -> Result<Tensor> {
    let mut values = Vec::with_capacity(data.len() * net.spec().num_classes);
    for chunk in data.chunks(batch_size)? {
        let z = net.forward_route(route, &chunk.x, Mode::Eval, stats)?;
        values.extend_from_slice(z.values());
    }
    Tensor::new(vec![data.len(), net.spec().num_classes], values)
}

/// Top-1 accuracy in `[0, 1]` of eval-mode predictions.
pub fn accuracy(
    net: &ResidualNet,
    route: &Route,
    stats: &NormStats,
    data: &SplitData,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation("accuracy over an empty split".into()));
    }
    let z = logits(net, route, stats, data, batch_size)?;
    let hits = z
        .argmax_rows()?
        .iter()
        .zip(&data.y)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Statistics to evaluate `route` with: re-calibrated or the network's own.
pub fn stats_for(
    net: &ResidualNet,
    route: &Route,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<NormStats> {
    if opts.recalibrate {
        bn_recalibrate(net, route, calib, opts)
    } else {
        Ok(net.stats().clone())
    }
}

/// Accuracy of `route` under the evaluation protocol.
pub fn evaluate_route(
    net: &ResidualNet,
    route: &Route,
    eval: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<f64> {
    let stats = stats_for(net, route, calib, opts)?;
    accuracy(net, route, &stats, eval, opts.batch_size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetReport {
    pub mask: SubnetMask,
    pub top1_accuracy: f64,
    pub recalibrated: bool,
    pub n_eval_samples: usize,
}

/// Five-number-plus-moments summary of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Summary {
            count: s.len(),
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetSweep {
    pub reports: Vec<SubnetReport>,
    pub summary: Summary,
}

/// Accuracy of every ordered sub-network, each re-calibrated separately.
pub fn eval_all_subnets(
    net: &ResidualNet,
    eval: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<SubnetSweep> {
    let masks = enumerate_ordered(net.spec(), opts.cap)?;
    eval_masks(net, &masks, eval, calib, opts)
}

/// Like [`eval_all_subnets`] for an explicit list of masks.
pub fn eval_masks(
    net: &ResidualNet,
    masks: &[SubnetMask],
    eval: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<SubnetSweep> {
    let reports: Vec<SubnetReport> = masks
        .par_iter()
        .map(|mask| {
            let route = mask.route(net.spec())?;
            Ok(SubnetReport {
                mask: mask.clone(),
                top1_accuracy: evaluate_route(net, &route, eval, calib, opts)?,
                recalibrated: opts.recalibrate,
                n_eval_samples: eval.len(),
            })
        })
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = reports.iter().map(|r| r.top1_accuracy).collect();
    let summary =
        Summary::of(&accs).ok_or_else(|| Error::Validation("no masks to evaluate".into()))?;
    Ok(SubnetSweep { reports, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoafingRow {
    pub mask: SubnetMask,
    pub acc_in_ensemble: f64,
    pub acc_individual: f64,
    /// `acc_individual - acc_in_ensemble`; positive means loafing.
    pub gap: f64,
}

/// For each mask, accuracy inside `net` versus a standalone network of the
/// same shape trained from scratch with common training under `cfg`.
pub fn loafing_gap(
    net: &ResidualNet,
    masks: &[SubnetMask],
    train: &SplitData,
    eval: &SplitData,
    calib: &SplitData,
    cfg: &TrainConfig,
    opts: &EvalOptions,
) -> Result<Vec<LoafingRow>> {
    masks
        .par_iter()
        .map(|mask| {
            let route = mask.route(net.spec())?;
            let in_ensemble = evaluate_route(net, &route, eval, calib, opts)?;
            let (solo, _) = train_individual(net.spec(), mask, train, cfg)?;
            let solo_route = Route::full(solo.spec());
            let individual = evaluate_route(&solo, &solo_route, eval, calib, opts)?;
            Ok(LoafingRow {
                mask: mask.clone(),
                acc_in_ensemble: in_ensemble,
                acc_individual: individual,
                gap: individual - in_ensemble,
            })
        })
        .collect()
}

/// KL divergence from the main network to one mask on the probe set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskKl {
    pub mask: SubnetMask,
    /// Mean over probe rows of per-row `KL(p_main || p_mask)`.
    pub kl_per_sample: f64,
    /// `KL` between the probe-averaged class distributions.
    pub kl_marginal: f64,
}

/// KL distribution over all masks for one snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSnapshot {
    pub epoch: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    pub per_mask: Vec<MaskKl>,
}

/// Re-calibrated eval-mode logits of every mask on `probe`. The main
/// network is the full mask, evaluated the same way.
fn mask_logits(
    net: &ResidualNet,
    masks: &[SubnetMask],
    probe: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<Vec<Tensor>> {
    masks
        .par_iter()
        .map(|mask| {
            let route = mask.route(net.spec())?;
            let stats = stats_for(net, &route, calib, opts)?;
            logits(net, &route, &stats, probe, opts.batch_size)
        })
        .collect()
}

fn marginal(probs: &Tensor) -> Result<Tensor> {
    let (m, n) = probs.dims2()?;
    let mut avg = vec![0.0; n];
    for i in 0..m {
        avg.iter_mut().zip(probs.row(i)).for_each(|(a, p)| *a += p);
    }
    avg.iter_mut().for_each(|a| *a /= m as f64);
    Tensor::new(vec![1, n], avg)
}

/// Per-snapshot distribution of `KL(main || mask)` over every ordered mask.
pub fn kl_distance_track(
    snapshots: &[(usize, ResidualNet)],
    probe: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<Vec<KlSnapshot>> {
    if snapshots.is_empty() {
        return Err(Error::Input("no snapshots to track".into()));
    }
    snapshots
        .iter()
        .map(|(epoch, net)| kl_snapshot(*epoch, net, probe, calib, opts))
        .collect()
}

pub fn kl_snapshot(
    epoch: usize,
    net: &ResidualNet,
    probe: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
) -> Result<KlSnapshot> {
    let masks = enumerate_ordered(net.spec(), opts.cap)?;
    let outputs = mask_logits(net, &masks, probe, calib, opts)?;
    let main_idx = masks
        .iter()
        .position(|m| m.is_main(net.spec()))
        .expect("enumeration contains the main network");
    let teacher = &outputs[main_idx];
    let teacher_marginal = marginal(&loss::softmax(teacher)?)?;
    let per_mask = masks
        .iter()
        .zip(&outputs)
        .map(|(mask, z)| {
            let rows = loss::kl_divergence_logits_rows(teacher, z)?;
            let kl_marginal =
                loss::kl_divergence(&teacher_marginal, &marginal(&loss::softmax(z)?)?)?.item()?;
            Ok(MaskKl {
                mask: mask.clone(),
                kl_per_sample: rows.iter().sum::<f64>() / rows.len() as f64,
                kl_marginal,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_mask.iter().map(|m| m.kl_per_sample).collect();
    let s = Summary::of(&values).expect("at least one mask");
    Ok(KlSnapshot {
        epoch,
        min: s.min,
        median: s.median,
        max: s.max,
        mean: s.mean,
        per_mask,
    })
}

/// Both sides of the CE-gap bound for one set of measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Measured main-network cross entropy.
    pub eps1: f64,
    /// Measured mean KL from the main network to the sub-networks.
    pub eps2: f64,
    pub num_classes: usize,
    /// `|CE_main - mean_s CE_s|`.
    pub lhs: f64,
    /// `eps1 + (eps2 + ln N) / exp(-eps1)`.
    pub rhs: f64,
    pub holds: bool,
}

/// Evaluates `|CE_m - mean(CE_s)| <= eps1 + (eps2 + ln N) / exp(-eps1)`
/// with `eps1 = ce_main` and `eps2 = mean(kl_values)`.
pub fn bound_check(
    ce_main: f64,
    kl_values: &[f64],
    ce_subs: &[f64],
    num_classes: usize,
) -> Result<BoundReport> {
    if num_classes < 2 {
        return Err(Error::Validation(format!(
            "the bound needs at least 2 classes, got {num_classes}"
        )));
    }
    if kl_values.is_empty() || ce_subs.is_empty() {
        return Err(Error::Validation("bound check without sub-networks".into()));
    }
    let eps1 = ce_main;
    let eps2 = kl_values.iter().sum::<f64>() / kl_values.len() as f64;
    let mean_sub = ce_subs.iter().sum::<f64>() / ce_subs.len() as f64;
    let lhs = (ce_main - mean_sub).abs();
    let rhs = eps1 + (eps2 + (num_classes as f64).ln()) / (-eps1).exp();
    Ok(BoundReport {
        eps1,
        eps2,
        num_classes,
        lhs,
        rhs,
        holds: lhs <= rhs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    /// One bound per probe row; the snapshot holds if every row holds.
    PerSample,
    /// One bound from batch-mean CE and KL.
    BatchMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub mode: BoundMode,
    pub samples: usize,
    pub holding: usize,
    pub all_hold: bool,
    /// The report with the smallest `rhs - lhs`.
    pub tightest: BoundReport,
}

/// Checks the CE-gap bound for `net` over every ordered mask on `probe`.
pub fn bound_check_network(
    net: &ResidualNet,
    probe: &SplitData,
    calib: &SplitData,
    opts: &EvalOptions,
    mode: BoundMode,
) -> Result<BoundSummary> {
    let spec = net.spec();
    let masks = enumerate_ordered(spec, opts.cap)?;
    let outputs = mask_logits(net, &masks, probe, calib, opts)?;
    let main_idx = masks
        .iter()
        .position(|m| m.is_main(spec))
        .expect("main present");
    let teacher = &outputs[main_idx];
    let ce_main = loss::cross_entropy_rows(teacher, &probe.y)?;
    let mut ce_subs = Vec::with_capacity(masks.len());
    let mut kls = Vec::with_capacity(masks.len());
    for z in &outputs {
        ce_subs.push(loss::cross_entropy_rows(z, &probe.y)?);
        kls.push(loss::kl_divergence_logits_rows(teacher, z)?);
    }
    let n = spec.num_classes;
    let reports: Vec<BoundReport> = match mode {
        BoundMode::PerSample => (0..probe.len())
            .map(|i| {
                let kl: Vec<f64> = kls.iter().map(|k| k[i]).collect();
                let ce: Vec<f64> = ce_subs.iter().map(|c| c[i]).collect();
                bound_check(ce_main[i], &kl, &ce, n)
            })
            .collect::<Result<_>>()?,
        BoundMode::BatchMean => {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let kl: Vec<f64> = kls.iter().map(|k| mean(k)).collect();
            let ce: Vec<f64> = ce_subs.iter().map(|c| mean(c)).collect();
            vec![bound_check(mean(&ce_main), &kl, &ce, n)?]
        }
    };
    let holding = reports.iter().filter(|r| r.holds).count();
    let tightest = reports
        .iter()
        .min_by(|a, b| (a.rhs - a.lhs).total_cmp(&(b.rhs - b.lhs)))
        .cloned()
        .ok_or_else(|| Error::Validation("empty probe set".into()))?;
    Ok(BoundSummary {
        mode,
        samples: reports.len(),
        holding,
        all_hold: holding == reports.len(),
        tightest,
    })
}
