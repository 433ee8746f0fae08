use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use stimtrain::autodiff::Tape;
use stimtrain::destruction::{enumerate_deletions, enumerate_permutations};
use stimtrain::evaluation::{evaluate_route, EvalOptions};
use stimtrain::network::{enumerate_ordered, Mode};
use stimtrain::training::{train_stimulative, TrainConfig};
use stimtrain::{Route, Split};
use stimtrain_bench::{desk_data, desk_net, desk_spec};

fn forward_backward(c: &mut Criterion) {
    let net = desk_net();
    let data = desk_data(10);
    let batch = data.split(Split::Train).head(64).unwrap();
    let labels = stimtrain::Tensor::one_hot(&batch.y, 10).unwrap();
    let full = Route::full(net.spec());

    c.bench_function("forward_eval_64", |b| {
        b.iter(|| {
            net.forward_route(&full, &batch.x, Mode::Eval, net.stats())
                .unwrap()
        })
    });
    c.bench_function("forward_backward_64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let x = tape.constant(&batch.x);
            let out = net
                .forward_on(&mut tape, &vars, x, &full, Mode::Train, net.stats())
                .unwrap();
            let loss = tape.cross_entropy(out.logits, &labels).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

fn training_epoch(c: &mut Criterion) {
    let data = desk_data(64);
    let train = data.split(Split::Train);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("stimulative_epoch_640_rows", |b| {
        b.iter_batched(
            desk_net,
            |mut net| train_stimulative(&mut net, &train, &cfg, None).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let net = desk_net();
    let data = desk_data(10);
    let (eval, calib) = (data.split(Split::Eval), data.split(Split::Calib));
    let opts = EvalOptions::default();
    let route = Route::full(net.spec());
    c.bench_function("recalibrated_eval_1000_rows", |b| {
        b.iter(|| evaluate_route(&net, &route, &eval, &calib, &opts).unwrap())
    });
}

fn enumeration(c: &mut Criterion) {
    let spec = desk_spec();
    c.bench_function("enumerate_ordered", |b| {
        b.iter(|| enumerate_ordered(&spec, 10_000).unwrap())
    });
    c.bench_function("enumerate_deletions_k3", |b| {
        b.iter(|| enumerate_deletions(&spec, 3).unwrap())
    });
    c.bench_function("enumerate_permutations_c1_to_4", |b| {
        b.iter(|| {
            (1..=4)
                .map(|k| enumerate_permutations(&spec, k).unwrap().len())
                .sum::<usize>()
        })
    });
}

criterion_group!(
    benches,
    forward_backward,
    training_epoch,
    evaluation,
    enumeration
);
criterion_main!(benches);
