use std::hint::black_box;

use barnn::datagen::{gen_sinusoid, SINUSOID_STEPS};
use barnn::forecaster::{stack_states, TrainOptions};
use barnn::inference::{rollout, RolloutOptions};
use barnn::prior::{kl_tvamp, tvamp_stats};
use barnn::rng::{normal_tensor, seeded};
use barnn::{AdamState, Forecaster, ForecasterConfig, PriorKind, Tensor, Variant};
use criterion::{criterion_group, criterion_main, Criterion};

fn matmul(c: &mut Criterion) {
    let mut rng = seeded(1);
    let a = normal_tensor(&mut rng, [128, 64]);
    let b = normal_tensor(&mut rng, [64, 64]);
    c.bench_function("matmul 128x64x64", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let data = gen_sinusoid(128, 0).unwrap();
    let refs: Vec<_> = data.iter().collect();
    let states = stack_states(&refs).unwrap();
    let mut group = c.benchmark_group("train_step batch 128");
    for variant in [Variant::PlainMlp, Variant::Barnn(PriorKind::Tvamp)] {
        let mut model = Forecaster::new(variant, ForecasterConfig::default(), 0).unwrap();
        let mut adam = AdamState::new(1e-4, 1e-8);
        let mut rng = seeded(2);
        let opts = TrainOptions::default();
        group.bench_function(variant.to_string(), |bench| {
            bench.iter(|| model.train_step(&states, 50, &opts, 1024, &mut adam, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn rollout_100(c: &mut Criterion) {
    let model = Forecaster::new(Variant::Barnn(PriorKind::Tvamp), ForecasterConfig::default(), 0).unwrap();
    let y0: Vec<f64> = gen_sinusoid(100, 1).unwrap().iter().map(|t| t.y[0]).collect();
    let opts = RolloutOptions::stochastic(SINUSOID_STEPS);
    c.bench_function("rollout 100 trajectories x 100 steps", |bench| {
        bench.iter(|| rollout(&model, black_box(&y0), &opts, 3).unwrap())
    });
}

fn kl(c: &mut Criterion) {
    let alpha = Tensor::from_fn([128, 4], |i| 0.5 + (i % 17) as f64 * 0.05);
    let dims = [8 * 64, 64 * 64, 64 * 64, 64];
    c.bench_function("tvamp stats + kl, batch 128", |bench| {
        bench.iter(|| {
            let stats = tvamp_stats(black_box(&alpha), 1).unwrap();
            (0..128)
                .map(|r| kl_tvamp(alpha.row(r), &stats, &dims).unwrap())
                .sum::<f64>()
        })
    });
}

criterion_group!(benches, matmul, train_step, rollout_100, kl);
criterion_main!(benches);
