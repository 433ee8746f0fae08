//! Command bodies. Each runs inside a [`RunDir`] and reads its settings
//! from the manifest, so a replay executes exactly the same code path.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use stimtrain::checkpoint::{load_checkpoint, save_checkpoint};
use stimtrain::destruction::{
    enumerate_deletions, enumerate_permutations, evaluate_plans, read_plans, Family, PlanKind,
    ReportRow,
};
use stimtrain::evaluation::{
    bound_check_network, eval_masks, evaluate_route, kl_snapshot, BoundSummary, Summary,
};
use stimtrain::network::{enumerate_ordered, sample_ordered};
use stimtrain::training::{
    stochastic_depth_eval_route, stream_rng, train_common, train_stimulative,
    train_stochastic_depth, EpochEnd, MetricsRecord,
};
use stimtrain::{DestructionPlan, Error, ResidualNet, Route, Split, SubnetMask};

use crate::config::Config;
use crate::run::{read_manifest, DestructKind, Invocation, RunDir, TrainMode, MANIFEST};

/// Artifacts that legitimately differ between a run and its replay.
const NONDETERMINISTIC: &[&str] = &["timing.jsonl"];

/// Creates a run directory, executes `invocation` in it and finalizes the
/// manifest whatever the outcome.
pub fn launch(out: Option<&Path>, invocation: Invocation, config: &Config) -> Result<PathBuf> {
    let mut run = RunDir::create(out, invocation, config)?;
    let outcome = execute(&mut run);
    run.finish(&outcome)?;
    outcome.map(|()| run.path.clone())
}

fn execute(run: &mut RunDir) -> Result<()> {
    match run.manifest.invocation.clone() {
        Invocation::Train { mode, mask } => train(run, mode, mask.as_ref()),
        Invocation::EvalSubnets { checkpoint, sample } => eval_subnets(run, &checkpoint, sample),
        Invocation::Destruct {
            ct,
            st,
            kind,
            max_level,
            plans,
        } => destruct(run, &ct, &st, kind, max_level, plans.as_deref()),
        Invocation::TrackKl { run_dir } => track_kl(run, &run_dir),
        Invocation::BoundCheck { run_dir, mode } => {
            let rows = bound_check(run, &run_dir, mode)?;
            if let Some(bad) = rows.iter().find(|r| !r.summary.all_hold) {
                eprintln!(
                    "warning: bound violated at epoch {} ({} of {} held)",
                    bad.epoch, bad.summary.holding, bad.summary.samples
                );
            }
            Ok(())
        }
    }
}

/// Re-executes the run described by `manifest` into a new directory. With
/// `verify`, every deterministic artifact must match the original byte for
/// byte.
pub fn replay(manifest: &Path, out: Option<&Path>, verify: bool) -> Result<PathBuf> {
    let original = read_manifest(manifest)?;
    let src_dir = if manifest.is_dir() {
        manifest.to_path_buf()
    } else {
        manifest
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    };
    let dir = launch(out, original.invocation.clone(), &original.config)?;
    if verify {
        let mut mismatched = Vec::new();
        for a in &original.artifacts {
            if NONDETERMINISTIC.contains(&a.as_str()) {
                continue;
            }
            let old =
                std::fs::read(src_dir.join(a)).with_context(|| format!("reading original {a}"))?;
            let new =
                std::fs::read(dir.join(a)).with_context(|| format!("reading replayed {a}"))?;
            if old != new {
                mismatched.push(a.clone());
            }
        }
        if !mismatched.is_empty() {
            bail!(
                "replay differs from the original in: {}",
                mismatched.join(", ")
            );
        }
    }
    Ok(dir)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize)]
struct Timing {
    epoch: usize,
    steps: usize,
    wall_time: f64,
}

#[derive(Serialize)]
struct FinalEval<'a> {
    mode: TrainMode,
    network: String,
    eval_accuracy: f64,
    n_eval_samples: usize,
    last_metrics: Option<&'a MetricsRecord>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:04}.ckpt")
}

fn train(run: &mut RunDir, mode: TrainMode, mask: Option<&SubnetMask>) -> Result<()> {
    let cfg = run.manifest.config.clone();
    let data = cfg.dataset()?;
    let spec = cfg.network_spec(data.input_dim())?;
    let train = data.split(Split::Train);
    let mut net = match mode {
        TrainMode::Individual => {
            let mask = mask.cloned().unwrap_or_else(|| SubnetMask::smallest(&spec));
            mask.validate(&spec)?;
            ResidualNet::build(&spec.truncated(mask.kept()), cfg.train.seed)?
        }
        _ => {
            if mask.is_some() {
                bail!(Error::Validation(
                    "--mask only applies to --mode individual".into()
                ));
            }
            ResidualNet::build(&spec, cfg.train.seed)?
        }
    };

    std::fs::create_dir_all(run.file("checkpoints"))?;
    let metrics_path = run.file("metrics.jsonl");
    let timing_path = run.file("timing.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut timing = BufWriter::new(File::create(&timing_path)?);
    run.record("metrics.jsonl");
    run.record("timing.jsonl");

    let (every, epochs) = (cfg.train.checkpoint_every, cfg.train.epochs);
    let mut written = 0usize;
    let mut saved = Vec::new();
    let mut observer = |end: EpochEnd<'_>| -> stimtrain::Result<()> {
        for r in &end.metrics[written..] {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
        }
        written = end.metrics.len();
        metrics.flush().map_err(io_err(&metrics_path))?;
        let t = Timing {
            epoch: end.epoch,
            steps: end.metrics.len(),
            wall_time: end.metrics.last().map_or(0.0, |r| r.wall_time),
        };
        writeln!(
            timing,
            "{}",
            serde_json::to_string(&t).expect("timing serializes")
        )
        .map_err(io_err(&timing_path))?;
        if (every > 0 && end.epoch.is_multiple_of(every)) || end.epoch == epochs {
            let name = checkpoint_name(end.epoch);
            save_checkpoint(end.net, &run.path.join(&name))?;
            saved.push(name);
        }
        Ok(())
    };
    let trained = match mode {
        TrainMode::Common | TrainMode::Individual => {
            train_common(&mut net, &train, &cfg.train, Some(&mut observer))
        }
        TrainMode::Stimulative => {
            train_stimulative(&mut net, &train, &cfg.train, Some(&mut observer))
        }
        TrainMode::StochasticDepth => {
            train_stochastic_depth(&mut net, &train, &cfg.train, Some(&mut observer))
        }
    };
    timing.flush()?;
    for name in std::mem::take(&mut saved) {
        run.record(name);
    }
    let report = trained?;

    save_checkpoint(&net, &run.file("final.ckpt"))?;
    run.record("final.ckpt");
    let route = match mode {
        TrainMode::StochasticDepth => {
            stochastic_depth_eval_route(net.spec(), cfg.train.stochastic_depth_final_p)
        }
        _ => Route::full(net.spec()),
    };
    let eval = data.split(Split::Eval);
    let acc = evaluate_route(&net, &route, &eval, &data.split(Split::Calib), &cfg.eval)?;
    run.write_json(
        "final_eval.json",
        &FinalEval {
            mode,
            network: net.spec().to_string(),
            eval_accuracy: acc,
            n_eval_samples: eval.len(),
            last_metrics: report.metrics.last(),
        },
    )?;
    println!("{}: eval accuracy {:.4}", run.path.display(), acc);
    Ok(())
}

fn load_matching(path: &Path, cfg: &Config, input_dim: usize) -> Result<ResidualNet> {
    let net = load_checkpoint(path, None)?;
    let expected = cfg.network_spec(input_dim)?;
    if net.spec().input_dim != expected.input_dim || net.spec().num_classes != expected.num_classes
    {
        bail!(Error::Incompatible {
            expected: expected.to_string(),
            found: format!("{} in {}", net.spec(), path.display()),
        });
    }
    Ok(net)
}

#[derive(Serialize)]
struct SweepSummary {
    network: String,
    masks: usize,
    sampled: bool,
    main_accuracy: Option<f64>,
    summary: Summary,
}

fn eval_subnets(run: &mut RunDir, checkpoint: &Path, sample: Option<usize>) -> Result<()> {
    let cfg = run.manifest.config.clone();
    let data = cfg.dataset()?;
    let net = load_matching(checkpoint, &cfg, data.input_dim())?;
    let spec = net.spec();
    let masks = match sample {
        Some(n) => {
            let mut rng = stream_rng(cfg.eval.calib_seed, 3);
            let mut m: Vec<SubnetMask> = (0..n).map(|_| sample_ordered(spec, &mut rng)).collect();
            m.sort();
            m.dedup();
            m
        }
        None => enumerate_ordered(spec, cfg.eval.cap).map_err(|e| match e {
            Error::Capacity(_) => anyhow!(e).context(
                "raise the cap with --set eval.cap=N, or evaluate a random subset with --sample N",
            ),
            e => e.into(),
        })?,
    };
    let sweep = eval_masks(
        &net,
        &masks,
        &data.split(Split::Eval),
        &data.split(Split::Calib),
        &cfg.eval,
    )?;
    let mut lines = String::new();
    for r in &sweep.reports {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    run.write("subnets.jsonl", lines.as_bytes())?;
    let main_accuracy = sweep
        .reports
        .iter()
        .find(|r| r.mask.is_main(spec))
        .map(|r| r.top1_accuracy);
    let s = sweep.summary;
    run.write_json(
        "summary.json",
        &SweepSummary {
            network: spec.to_string(),
            masks: sweep.reports.len(),
            sampled: sample.is_some(),
            main_accuracy,
            summary: s,
        },
    )?;
    println!(
        "{} masks: mean {:.4} std {:.4} min {:.4} max {:.4}",
        s.count, s.mean, s.std, s.min, s.max
    );
    Ok(())
}

#[derive(Serialize)]
struct DropRow<'a> {
    family: Family,
    level: usize,
    plan: &'a DestructionPlan,
    drop_common: f64,
    drop_stimulative: f64,
}

fn family_of(plan: &DestructionPlan) -> Family {
    match plan.kind {
        PlanKind::DeleteOne | PlanKind::DeleteK => Family::Delete,
        PlanKind::Permute => Family::Permute,
    }
}

fn destruct(
    run: &mut RunDir,
    ct: &Path,
    st: &Path,
    kind: Option<DestructKind>,
    max_level: usize,
    plan_file: Option<&Path>,
) -> Result<()> {
    let cfg = run.manifest.config.clone();
    let data = cfg.dataset()?;
    let net_ct = load_matching(ct, &cfg, data.input_dim())?;
    let net_st = load_checkpoint(st, Some(net_ct.spec()))?;
    let spec = net_ct.spec();

    let mut levels: Vec<(Family, usize, Vec<DestructionPlan>)> = Vec::new();
    if let Some(path) = plan_file {
        for plan in read_plans(path, spec)? {
            let (family, level) = (family_of(&plan), plan.complexity);
            match levels
                .iter_mut()
                .find(|(f, l, _)| *f == family && *l == level)
            {
                Some((_, _, plans)) => plans.push(plan),
                None => levels.push((family, level, vec![plan])),
            }
        }
        levels.sort_by_key(|(f, l, _)| (*f == Family::Permute, *l));
    } else {
        if max_level == 0 {
            bail!(Error::Validation(
                "--max-k / --max-c must be at least 1".into()
            ));
        }
        let kind =
            kind.ok_or_else(|| Error::Validation("--kind is required without --plans".into()))?;
        match kind {
            DestructKind::DeleteOne => {
                levels.push((Family::Delete, 1, enumerate_deletions(spec, 1)?))
            }
            DestructKind::DeleteK => {
                for k in 1..=max_level {
                    levels.push((Family::Delete, k, enumerate_deletions(spec, k)?));
                }
            }
            DestructKind::Permute => {
                for c in 1..=max_level {
                    levels.push((Family::Permute, c, enumerate_permutations(spec, c)?));
                }
            }
        }
    }

    let (eval, calib) = (data.split(Split::Eval), data.split(Split::Calib));
    let mut rows = Vec::new();
    let mut lines = String::new();
    for (family, level, plans) in &levels {
        if plans.is_empty() {
            continue;
        }
        let a = evaluate_plans(&net_ct, plans, &eval, &calib, &cfg.eval)?;
        let b = evaluate_plans(&net_st, plans, &eval, &calib, &cfg.eval)?;
        for (x, y) in a.iter().zip(&b) {
            let row = DropRow {
                family: *family,
                level: *level,
                plan: &x.plan,
                drop_common: x.drop,
                drop_stimulative: y.drop,
            };
            lines.push_str(&serde_json::to_string(&row)?);
            lines.push('\n');
        }
        let summary = |r: &[stimtrain::destruction::PlanResult]| {
            Summary::of(&r.iter().map(|p| p.drop).collect::<Vec<_>>()).expect("non-empty level")
        };
        let row = ReportRow {
            family: *family,
            level: *level,
            plans: plans.len(),
            common: summary(&a),
            stimulative: summary(&b),
        };
        println!(
            "{:?} {}: {} plans, median drop common {:.2} stimulative {:.2}, max {:.2} / {:.2}",
            row.family,
            row.level,
            row.plans,
            row.common.median,
            row.stimulative.median,
            row.common.max,
            row.stimulative.max
        );
        rows.push(row);
    }
    run.write("drops.jsonl", lines.as_bytes())?;
    run.write_json(
        "report.json",
        &stimtrain::destruction::DestructionReport { rows },
    )?;
    Ok(())
}

/// `(epoch, path)` for every periodic checkpoint of a training run.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let dir = run_dir.join("checkpoints");
    let mut found = Vec::new();
    if let Ok(entries) = std::fs::read_dir(&dir) {
        for entry in entries {
            let path = entry?.path();
            let epoch = path.file_name().and_then(|n| n.to_str()).and_then(|n| {
                n.strip_prefix("epoch_")?
                    .strip_suffix(".ckpt")?
                    .parse()
                    .ok()
            });
            if let Some(e) = epoch {
                found.push((e, path));
            }
        }
    }
    if found.is_empty() {
        bail!(Error::Input(format!(
            "no checkpoints under {}",
            dir.display()
        )));
    }
    found.sort();
    Ok(found)
}

/// The configuration a follow-up command over `run_dir` starts from.
pub fn source_config(run_dir: &Path) -> Result<Config> {
    if !run_dir.join(MANIFEST).exists() {
        list_checkpoints(run_dir)?;
        bail!(Error::Input(format!(
            "{} has no {MANIFEST}",
            run_dir.display()
        )));
    }
    Ok(read_manifest(run_dir)?.config)
}

fn track_kl(run: &mut RunDir, run_dir: &Path) -> Result<()> {
    let cfg = run.manifest.config.clone();
    let ckpts = list_checkpoints(run_dir)?;
    let data = cfg.dataset()?;
    let probe = data
        .split(Split::Eval)
        .sample(cfg.eval.probe_size, cfg.eval.calib_seed)?;
    let calib = data.split(Split::Calib);
    let mut lines = String::new();
    for (epoch, path) in &ckpts {
        let net = load_matching(path, &cfg, data.input_dim())?;
        let snap = kl_snapshot(*epoch, &net, &probe, &calib, &cfg.eval)?;
        println!(
            "epoch {epoch:4}: KL min {:.4} median {:.4} max {:.4}",
            snap.min, snap.median, snap.max
        );
        lines.push_str(&serde_json::to_string(&snap)?);
        lines.push('\n');
    }
    run.write("kl.jsonl", lines.as_bytes())
}

#[derive(Serialize)]
pub struct BoundRow {
    pub epoch: usize,
    #[serde(flatten)]
    pub summary: BoundSummary,
}

fn bound_check(
    run: &mut RunDir,
    run_dir: &Path,
    mode: stimtrain::evaluation::BoundMode,
) -> Result<Vec<BoundRow>> {
    let cfg = run.manifest.config.clone();
    let ckpts = list_checkpoints(run_dir)?;
    let data = cfg.dataset()?;
    let probe = data
        .split(Split::Eval)
        .sample(cfg.eval.probe_size, cfg.eval.calib_seed)?;
    let calib = data.split(Split::Calib);
    let mut rows = Vec::new();
    let mut lines = String::new();
    for (epoch, path) in &ckpts {
        let net = load_matching(path, &cfg, data.input_dim())?;
        let summary = bound_check_network(&net, &probe, &calib, &cfg.eval, mode)?;
        println!(
            "epoch {epoch:4}: holds {} ({}/{}), tightest margin {:.4}",
            summary.all_hold,
            summary.holding,
            summary.samples,
            summary.tightest.rhs - summary.tightest.lhs
        );
        let row = BoundRow {
            epoch: *epoch,
            summary,
        };
        lines.push_str(&serde_json::to_string(&row)?);
        lines.push('\n');
        rows.push(row);
    }
    run.write("bound.jsonl", lines.as_bytes())?;
    Ok(rows)
}
