//! Acceptance suite. Runs every criterion at its stated tolerance and
//! runtime budget and prints one PASS/FAIL line per criterion; exits
//! nonzero if any fails.
//!
//! Criteria 5-7 share one desk-scale experiment: the default configuration
//! (10-class mixture data, a (2,3,4,2,3) residual MLP of width 32, 100
//! epochs) trained with common and stimulative training on three seeds.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stimtrain::autodiff::{Tape, Var};
use stimtrain::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use stimtrain::destruction::{
    enumerate_deletions, enumerate_permutations, evaluate_plans, PlanResult,
};
use stimtrain::evaluation::{bound_check, eval_all_subnets, kl_snapshot, loafing_gap, Summary};
use stimtrain::network::{
    enumerate_ordered, ordered_space_size, sample_ordered, Activation, Mode, NetworkSpec,
    ParamVars, StageSpec,
};
use stimtrain::training::{
    train_common, train_stimulative, train_stochastic_depth, EpochEnd, MetricsRecord, Sampling,
};
use stimtrain::{loss, ResidualNet, Route, Split, SubnetMask, Tensor, TrainConfig};
use stimtrain_cli::Config;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(budget: Duration, started: Instant, outcome: Outcome) -> Outcome {
    let took = started.elapsed();
    match outcome {
        Ok(d) if took <= budget => Ok(format!("{d}; {took:.1?}")),
        Ok(d) => Err(format!("{d}; {took:.1?} exceeds {budget:?}")),
        Err(d) => Err(format!("{d}; {took:.1?}")),
    }
}

// ---------------------------------------------------------------- 1

fn random_case(rng: &mut ChaCha8Rng) -> (ResidualNet, Tensor, Tensor, Route, f64, Tensor) {
    let stages: Vec<StageSpec> = (0..rng.random_range(1..=3))
        .map(|_| StageSpec {
            num_blocks: rng.random_range(1..=3),
            width: rng.random_range(2..=6),
        })
        .collect();
    let spec = NetworkSpec {
        input_dim: rng.random_range(2..=5),
        num_classes: rng.random_range(2..=4),
        stages,
        activation: if rng.random::<bool>() {
            Activation::Relu
        } else {
            Activation::Hswish
        },
    };
    let net = ResidualNet::build(&spec, rng.random()).unwrap();
    let rows = rng.random_range(3..=6);
    let x = Tensor::new(
        vec![rows, spec.input_dim],
        (0..rows * spec.input_dim)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap();
    let y: Vec<usize> = (0..rows)
        .map(|_| rng.random_range(0..spec.num_classes))
        .collect();
    let labels = Tensor::one_hot(&y, spec.num_classes).unwrap();
    let sub = sample_ordered(&spec, rng).route(&spec).unwrap();
    let teacher = loss::softmax(
        &net.forward_route(&Route::full(&spec), &x, Mode::Train, net.stats())
            .unwrap(),
    )
    .unwrap();
    (net, x, labels, sub, rng.random_range(0.0..10.0), teacher)
}

/// CE(main) + lambda * KL(teacher || softmax(sub)), batch statistics.
#[allow(clippy::too_many_arguments)]
fn objective(
    net: &ResidualNet,
    tape: &mut Tape,
    constant: bool,
    x: &Tensor,
    labels: &Tensor,
    sub: &Route,
    lambda: f64,
    teacher: &Tensor,
) -> (Var, ParamVars) {
    let vars = if constant {
        net.bind_constant(tape)
    } else {
        net.bind(tape)
    };
    let xv = tape.constant(x);
    let main = net
        .forward_on(
            tape,
            &vars,
            xv,
            &Route::full(net.spec()),
            Mode::Train,
            net.stats(),
        )
        .unwrap();
    let ce = tape.cross_entropy(main.logits, labels).unwrap();
    let s = net
        .forward_on(tape, &vars, xv, sub, Mode::Train, net.stats())
        .unwrap();
    let p = tape.softmax(s.logits).unwrap();
    let kl = tape.kl_divergence(teacher, p).unwrap();
    let kl = tape.scale(kl, lambda);
    (tape.add(ce, kl).unwrap(), vars)
}

fn gradient_oracle() -> Outcome {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut partials, mut max_params) = (0.0f64, 0usize, 0usize);
    for _ in 0..50 {
        let (net, x, labels, sub, lambda, teacher) = random_case(&mut rng);
        max_params = max_params.max(net.spec().parameter_count());
        let mut tape = Tape::new();
        let (l, vars) = objective(&net, &mut tape, false, &x, &labels, &sub, lambda, &teacher);
        let grads = tape.backward(l).unwrap();
        let mut g = net.clone();
        g.accumulate_grads(&vars, &grads).unwrap();
        let analytic: Vec<Vec<f64>> = g
            .params()
            .iter()
            .map(|(_, p)| p.grad().unwrap().to_vec())
            .collect();
        for (pi, row) in analytic.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                let at = |d: f64| {
                    let mut n = net.clone();
                    n.params_mut()[pi].1.values_mut()[j] += d;
                    let mut t = Tape::new();
                    let (l, _) = objective(&n, &mut t, true, &x, &labels, &sub, lambda, &teacher);
                    t.value(l)[0]
                };
                // fourth-order central difference
                let numeric = (8.0 * (at(H) - at(-H)) - (at(2.0 * H) - at(-2.0 * H))) / (12.0 * H);
                let scale = a.abs().max(numeric.abs());
                // both sides below 1e-7 are numerically zero
                let err = if scale > 1e-7 {
                    (a - numeric).abs() / scale
                } else {
                    0.0
                };
                worst = worst.max(err);
                partials += 1;
            }
        }
    }
    check(
        worst < 1e-4 && max_params <= 1000,
        format!("{partials} partials on 50 nets (<= {max_params} params), worst rel err {worst:.1e} (< 1e-4)"),
    )
}

// ---------------------------------------------------------------- 2

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sharp = if rng.random::<f64>() < 0.3 { 20.0 } else { 3.0 };
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-sharp..sharp)).collect();
    loss::softmax(&Tensor::new(vec![1, n], z).unwrap())
        .unwrap()
        .into_values()
}

fn appendix_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut holds = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=20);
        let (pm, ps) = (random_simplex(&mut rng, n), random_simplex(&mut rng, n));
        let y = rng.random_range(0..n);
        let kl: f64 = pm.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum();
        let r = bound_check(-pm[y].ln(), &[kl], &[-ps[y].ln()], n).map_err(|e| e.to_string())?;
        holds += usize::from(r.holds && r.lhs <= r.rhs);
    }
    let rhs = bound_check(0.1, &[0.05], &[0.1], 10)
        .map_err(|e| e.to_string())?
        .rhs;
    // independent closed form: eps1 + (eps2 + ln N) / exp(-eps1)
    let closed = 0.1 + (0.05 + 10f64.ln()) / (-0.1f64).exp();
    check(
        holds == 10_000 && (rhs - 2.700011).abs() <= 1e-5 && (rhs - closed).abs() < 1e-12,
        format!("{holds}/10000 triples hold; rhs(0.1, 0.05, 10) = {rhs:.6}"),
    )
}

// ---------------------------------------------------------------- 3

fn sampling_space() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let blocks: Vec<usize> = (0..rng.random_range(1..=5))
            .map(|_| rng.random_range(1..=5))
            .collect();
        let spec = NetworkSpec::uniform(2, 2, &blocks, 2);
        let expected: usize = blocks.iter().product();
        let got = enumerate_ordered(&spec, 10_000)
            .map_err(|e| e.to_string())?
            .len();
        if got != expected || ordered_space_size(&spec) != Some(expected as u128) {
            return Err(format!("{blocks:?}: {got} masks, expected {expected}"));
        }
    }
    let counts: Vec<usize> = [vec![2, 3, 4, 2, 3], vec![2, 3, 4, 2], vec![2, 3]]
        .iter()
        .map(|b| {
            enumerate_ordered(&NetworkSpec::uniform(2, 2, b, 2), 10_000)
                .unwrap()
                .len()
        })
        .collect();
    check(
        counts == [144, 48, 6],
        format!("100 random specs match the product; (2,3,4,2,3)/(2,3,4,2)/(2,3) -> {counts:?}"),
    )
}

// ---------------------------------------------------------------- 4

/// The published enumeration for (2,3,4,2,3), stage blocks separated by `|`.
const PERMUTATION_TABLE: [&[&str]; 4] = [
    &[
        "1 2|3 5 4|6 7 8 9|10 11|12 13 14",
        "1 2|3 4 5|6 8 7 9|10 11|12 13 14",
        "1 2|3 4 5|6 7 9 8|10 11|12 13 14",
        "1 2|3 4 5|6 9 8 7|10 11|12 13 14",
        "1 2|3 4 5|6 7 8 9|10 11|12 14 13",
    ],
    &[
        "1 2|3 5 4|6 8 7 9|10 11|12 13 14",
        "1 2|3 5 4|6 7 9 8|10 11|12 13 14",
        "1 2|3 5 4|6 9 8 7|10 11|12 13 14",
        "1 2|3 4 5|6 8 7 9|10 11|12 14 13",
        "1 2|3 4 5|6 7 9 8|10 11|12 14 13",
        "1 2|3 4 5|6 9 8 7|10 11|12 14 13",
        "1 2|3 4 5|6 8 9 7|10 11|12 13 14",
        "1 2|3 4 5|6 9 7 8|10 11|12 13 14",
        "1 2|3 5 4|6 7 8 9|10 11|12 14 13",
    ],
    &[
        "1 2|3 5 4|6 8 7 9|10 11|12 14 13",
        "1 2|3 5 4|6 7 9 8|10 11|12 14 13",
        "1 2|3 5 4|6 9 8 7|10 11|12 14 13",
        "1 2|3 5 4|6 8 9 7|10 11|12 13 14",
        "1 2|3 5 4|6 9 7 8|10 11|12 13 14",
        "1 2|3 4 5|6 8 9 7|10 11|12 14 13",
        "1 2|3 4 5|6 9 7 8|10 11|12 14 13",
    ],
    &[
        "1 2|3 5 4|6 8 9 7|10 11|12 14 13",
        "1 2|3 5 4|6 9 7 8|10 11|12 14 13",
    ],
];

fn parse_order(s: &str) -> Vec<usize> {
    s.split(['|', ' ']).map(|t| t.parse().unwrap()).collect()
}

fn permutation_enumeration() -> Outcome {
    let spec = NetworkSpec::uniform(16, 10, &[2, 3, 4, 2, 3], 4);
    let mut counts = Vec::new();
    for (i, table) in PERMUTATION_TABLE.iter().enumerate() {
        let plans = enumerate_permutations(&spec, i + 1).map_err(|e| e.to_string())?;
        counts.push(plans.len());
        let mut got: Vec<Vec<usize>> = plans.into_iter().map(|p| p.targets).collect();
        let mut want: Vec<Vec<usize>> = table.iter().map(|s| parse_order(s)).collect();
        got.sort();
        want.sort();
        if got != want {
            return Err(format!(
                "complexity {} differs from the published table",
                i + 1
            ));
        }
    }
    let probe = parse_order("1 2|3 4 5|6 9 8 7|10 11|12 13 14");
    let c1 = enumerate_permutations(&spec, 1).unwrap();
    check(
        counts == [5, 9, 7, 2] && c1.iter().any(|p| p.targets == probe),
        format!("counts {counts:?}; every level equals the published set; c=1 holds [6, 9, 8, 7]"),
    )
}

// ---------------------------------------------------------- 5, 6, 7

struct SeedRun {
    ct_main: f64,
    ct_mean: f64,
    ct_std: f64,
    st_main: f64,
    st_mean: f64,
    st_std: f64,
    loafing_gap: f64,
    ct_del1_max: f64,
    st_del1_max: f64,
    ct_k3_median: f64,
    st_k_le3_max: f64,
    ct_kl: (f64, f64),
    st_kl: (f64, f64),
}

fn max_drop(r: &[PlanResult]) -> f64 {
    r.iter().map(|p| p.drop).fold(f64::MIN, f64::max)
}

fn desk_seed(seed: u64) -> SeedRun {
    let mut cfg = Config::default();
    cfg.data.seed = seed;
    cfg.train.seed = seed;
    let data = cfg.dataset().unwrap();
    let spec = cfg.network_spec(data.input_dim()).unwrap();
    let (train, calib, eval) = (
        data.split(Split::Train),
        data.split(Split::Calib),
        data.split(Split::Eval),
    );
    let probe = eval
        .sample(cfg.eval.probe_size, cfg.eval.calib_seed)
        .unwrap();
    let opts = cfg.eval;
    let epochs = cfg.train.epochs;

    let run = |lambda: f64| {
        let tc = TrainConfig {
            lambda,
            ..cfg.train.clone()
        };
        let mut net = ResidualNet::build(&spec, tc.seed).unwrap();
        let mut kl = (0.0, 0.0);
        let mut obs = |e: EpochEnd<'_>| {
            if e.epoch == 1 {
                kl.0 = kl_snapshot(e.epoch, e.net, &probe, &calib, &opts)?.max;
            }
            if e.epoch == epochs {
                kl.1 = kl_snapshot(e.epoch, e.net, &probe, &calib, &opts)?.max;
            }
            Ok(())
        };
        if lambda == 0.0 {
            train_common(&mut net, &train, &tc, Some(&mut obs)).unwrap();
        } else {
            train_stimulative(&mut net, &train, &tc, Some(&mut obs)).unwrap();
        }
        let sweep = eval_all_subnets(&net, &eval, &calib, &opts).unwrap();
        let main = sweep
            .reports
            .iter()
            .find(|r| r.mask.is_main(&spec))
            .unwrap()
            .top1_accuracy;
        (net, kl, main, sweep.summary)
    };
    let (ct, ct_kl, ct_main, ct_sum) = run(0.0);
    let (st, st_kl, st_main, st_sum) = run(cfg.train.lambda);

    let common_cfg = TrainConfig {
        lambda: 0.0,
        ..cfg.train.clone()
    };
    let loaf = loafing_gap(
        &ct,
        &[SubnetMask::smallest(&spec)],
        &train,
        &eval,
        &calib,
        &common_cfg,
        &opts,
    )
    .unwrap();

    let drops = |net: &ResidualNet, k: usize| {
        evaluate_plans(
            net,
            &enumerate_deletions(&spec, k).unwrap(),
            &eval,
            &calib,
            &opts,
        )
        .unwrap()
    };
    let (ct1, st1) = (drops(&ct, 1), drops(&st, 1));
    let ct3 = drops(&ct, 3);
    let st_le3 = max_drop(&st1)
        .max(max_drop(&drops(&st, 2)))
        .max(max_drop(&drops(&st, 3)));
    let ct_k3_median = Summary::of(&ct3.iter().map(|p| p.drop).collect::<Vec<_>>())
        .unwrap()
        .median;

    SeedRun {
        ct_main,
        ct_mean: ct_sum.mean,
        ct_std: ct_sum.std,
        st_main,
        st_mean: st_sum.mean,
        st_std: st_sum.std,
        loafing_gap: loaf[0].gap,
        ct_del1_max: max_drop(&ct1),
        st_del1_max: max_drop(&st1),
        ct_k3_median,
        st_k_le3_max: st_le3,
        ct_kl,
        st_kl,
    }
}

fn avg(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn loafing_direction(runs: &[SeedRun]) -> Outcome {
    let (ct_main, ct_mean, ct_std) = (
        avg(runs, |r| r.ct_main),
        avg(runs, |r| r.ct_mean),
        avg(runs, |r| r.ct_std),
    );
    let (st_main, st_mean, st_std) = (
        avg(runs, |r| r.st_main),
        avg(runs, |r| r.st_mean),
        avg(runs, |r| r.st_std),
    );
    let gap = avg(runs, |r| r.loafing_gap);
    check(
        ct_mean <= ct_main - 0.10 && gap > 0.0 && (st_main - st_mean).abs() <= 0.03 && st_std < ct_std / 3.0,
        format!(
            "CT main {:.1}% mean {:.1}% std {:.2}; smallest-mask loafing gap {:+.1} pts; ST main {:.1}% mean {:.1}% std {:.2} (3 seeds)",
            100.0 * ct_main,
            100.0 * ct_mean,
            100.0 * ct_std,
            100.0 * gap,
            100.0 * st_main,
            100.0 * st_mean,
            100.0 * st_std
        ),
    )
}

fn destruction_robustness(runs: &[SeedRun]) -> Outcome {
    let ok = runs
        .iter()
        .all(|r| r.st_del1_max < r.ct_del1_max && r.st_k_le3_max < r.ct_k3_median);
    let per: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "del1 max ST {:.1} < CT {:.1}, ST max k<=3 {:.1} < CT median k=3 {:.1}",
                r.st_del1_max, r.ct_del1_max, r.st_k_le3_max, r.ct_k3_median
            )
        })
        .collect();
    check(ok, format!("drops in pts per seed: {}", per.join(" | ")))
}

fn kl_tracking(runs: &[SeedRun]) -> Outcome {
    let ok = runs
        .iter()
        .all(|r| r.st_kl.1 < r.ct_kl.0 && r.ct_kl.1 > r.ct_kl.0);
    let per: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "CT {:.3}->{:.3}, ST final {:.3}",
                r.ct_kl.0, r.ct_kl.1, r.st_kl.1
            )
        })
        .collect();
    check(
        ok,
        format!("max KL epoch 1 -> final per seed: {}", per.join(" | ")),
    )
}

// ---------------------------------------------------------------- 8

fn losses(m: &[MetricsRecord]) -> Vec<(u64, u64)> {
    m.iter()
        .map(|r| (r.loss_main_ce.to_bits(), r.loss_total.to_bits()))
        .collect()
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stimtrain"))
        .args(args)
        .env_remove("STIMTRAIN_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn equivalence_and_determinism() -> Outcome {
    let mut cfg = Config::default();
    cfg.network.width = 16;
    cfg.data.train_per_class = 100;
    cfg.train.epochs = 5;
    let data = cfg.dataset().unwrap();
    let spec = cfg.network_spec(data.input_dim()).unwrap();
    let train = data.split(Split::Train);
    let fit = |tc: &TrainConfig,
               f: fn(
        &mut ResidualNet,
        &stimtrain::SplitData,
        &TrainConfig,
        Option<&mut stimtrain::training::Observer<'_>>,
    ) -> stimtrain::Result<stimtrain::training::TrainReport>| {
        let mut net = ResidualNet::build(&spec, tc.seed).unwrap();
        let report = f(&mut net, &train, tc, None).unwrap();
        (net.flat_state(), losses(&report.metrics))
    };
    let base = fit(&cfg.train, train_common);
    let zero = fit(
        &TrainConfig {
            lambda: 0.0,
            ..cfg.train.clone()
        },
        train_stimulative,
    );
    let unsampled = fit(
        &TrainConfig {
            sampling: Sampling::None,
            ..cfg.train.clone()
        },
        train_stimulative,
    );
    let sd = fit(
        &TrainConfig {
            stochastic_depth_final_p: 1.0,
            ..cfg.train.clone()
        },
        train_stochastic_depth,
    );
    let bits = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len()
    };
    if !(bits(&base.0, &zero.0) && base.1 == zero.1) {
        return Err("lambda = 0 differs from common training".into());
    }
    if !(bits(&base.0, &unsampled.0) && bits(&base.0, &sd.0) && base.1 == sd.1) {
        return Err("sampling = none or final_p = 1 differs from common training".into());
    }

    // every command replays byte-identically from its manifest
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let small = [
        "--set",
        "train.epochs=4",
        "--set",
        "data.train_per_class=60",
        "--set",
        "data.calib_per_class=20",
        "--set",
        "data.eval_per_class=20",
        "--set",
        "network.width=8",
        "--set",
        "train.checkpoint_every=2",
    ];
    let with = |head: &[&str]| -> Vec<String> {
        head.iter()
            .chain(small.iter())
            .map(|s| s.to_string())
            .collect()
    };
    let mut runs = Vec::new();
    for mode in ["common", "stimulative", "stochastic-depth", "individual"] {
        let out = d(mode);
        let args = with(&["train", "--mode", mode, "--out", &out]);
        run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
        runs.push(out);
    }
    let (ct, st) = (
        format!("{}/final.ckpt", d("common")),
        format!("{}/final.ckpt", d("stimulative")),
    );
    let follow_ups = [
        with(&["eval-subnets", "--checkpoint", &st, "--out", &d("ev")]),
        with(&[
            "destruct",
            "--ct",
            &ct,
            "--st",
            &st,
            "--kind",
            "permute",
            "--out",
            &d("perm"),
        ]),
        with(&[
            "destruct",
            "--ct",
            &ct,
            "--st",
            &st,
            "--kind",
            "delete-k",
            "--out",
            &d("del"),
        ]),
        vec!["track-kl".into(), d("stimulative"), "--out".into(), d("kl")],
        vec!["bound-check".into(), d("common"), "--out".into(), d("bc")],
    ];
    for (args, name) in follow_ups.iter().zip(["ev", "perm", "del", "kl", "bc"]) {
        run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
        runs.push(d(name));
    }
    for r in &runs {
        let again = format!("{r}-replay");
        run_cli(&[
            "replay",
            &format!("{r}/manifest.json"),
            "--out",
            &again,
            "--verify",
        ])?;
    }
    Ok(format!(
        "lambda=0, sampling=none and final_p=1 are bit-identical to common training; {} CLI runs replay byte-identically",
        runs.len()
    ))
}

// ---------------------------------------------------------------- 9

fn checkpoint_io() -> Outcome {
    let cfg = Config::default();
    let data = cfg.dataset().unwrap();
    let spec = cfg.network_spec(data.input_dim()).unwrap();
    let mut net = ResidualNet::build(&spec, 3).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        ..cfg.train.clone()
    };
    train_stimulative(&mut net, &data.split(Split::Train), &tc, None).unwrap();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&net, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path, Some(&spec)).map_err(|e| e.to_string())?;
    let same_state = net
        .flat_state()
        .iter()
        .zip(back.flat_state())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let probe = data.split(Split::Eval).sample(512, 0).unwrap().x;
    let full = Route::full(&spec);
    let la = net
        .forward_route(&full, &probe, Mode::Eval, net.stats())
        .unwrap();
    let lb = back
        .forward_route(&full, &probe, Mode::Eval, back.stats())
        .unwrap();
    let same_logits = la
        .values()
        .iter()
        .zip(lb.values())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let resaved = encode(&back) == std::fs::read(&path).unwrap();

    // every single-byte flip of a small checkpoint, and random flips of the
    // desk-size one, must be rejected
    let small = ResidualNet::build(&NetworkSpec::uniform(16, 10, &[2, 3, 4, 2, 3], 6), 1).unwrap();
    let bytes = encode(&small);
    let mut flips = 0usize;
    let mut missed = 0usize;
    let p = Path::new("flip.ckpt");
    for i in 0..bytes.len() {
        for mask in [0x01u8, 0xFF] {
            let mut b = bytes.clone();
            b[i] ^= mask;
            flips += 1;
            missed += usize::from(decode(&b, p, None).is_ok());
        }
    }
    let big = encode(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let mut b = big.clone();
        let i = rng.random_range(0..b.len());
        b[i] ^= 1 << rng.random_range(0..8);
        flips += 1;
        missed += usize::from(decode(&b, p, None).is_ok());
    }
    check(
        same_state && same_logits && resaved && missed == 0,
        format!(
            "state and probe logits bit-exact after reload ({} values); {}/{flips} byte flips detected",
            net.flat_state().len(),
            flips - missed
        ),
    )
}

fn main() {
    // libtest-style flags (e.g. --nocapture, filters) are accepted and ignored
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} [{tag}] {name}: {detail}");
        results.push((n, name, outcome));
    };

    let t = Instant::now();
    record(
        1,
        "gradient oracle",
        within(Duration::from_secs(60), t, gradient_oracle()),
    );
    let t = Instant::now();
    record(
        2,
        "sub-network cross-entropy bound",
        within(Duration::from_secs(10), t, appendix_bound()),
    );
    let t = Instant::now();
    record(
        3,
        "sampling-space arithmetic",
        within(Duration::from_secs(5), t, sampling_space()),
    );
    let t = Instant::now();
    record(
        4,
        "permutation enumeration",
        within(Duration::from_secs(5), t, permutation_enumeration()),
    );

    let t = Instant::now();
    let runs: Vec<SeedRun> = (0..3).map(desk_seed).collect();
    let experiment = t.elapsed();
    let budget = |limit: u64, outcome: Outcome| match outcome {
        Ok(d) if experiment <= Duration::from_secs(limit) => {
            Ok(format!("{d}; experiment {experiment:.1?}"))
        }
        Ok(d) => Err(format!(
            "{d}; experiment {experiment:.1?} exceeds {limit} s"
        )),
        Err(d) => Err(d),
    };
    record(
        5,
        "loafing direction",
        budget(30 * 60, loafing_direction(&runs)),
    );
    record(
        6,
        "destruction robustness",
        budget(30 * 60, destruction_robustness(&runs)),
    );
    record(7, "KL tracking", budget(30 * 60, kl_tracking(&runs)));

    let t = Instant::now();
    record(
        8,
        "equivalence and determinism",
        within(Duration::from_secs(300), t, equivalence_and_determinism()),
    );
    let t = Instant::now();
    record(
        9,
        "checkpoint round trip and corruption",
        within(Duration::from_secs(60), t, checkpoint_io()),
    );

    let failed: Vec<usize> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| r.0)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
