use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use tood_bench::{bench_config, bench_scenes};
use tood_core::trainer::{build_model, predict, train_step, Sgd};

fn step(c: &mut Criterion) {
    let cfg = bench_config();
    let scenes = bench_scenes(&cfg);
    let batch: Vec<_> = scenes.iter().collect();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_batch8_128px", |bench| {
        let mut params = build_model(&cfg).unwrap();
        let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.warmup_steps);
        let mut k = 0;
        bench.iter(|| {
            k += 1;
            black_box(train_step(&cfg, &mut params, &mut opt, &batch, k).unwrap())
        })
    });
    let params = build_model(&cfg).unwrap();
    group.bench_function("forward_128px", |bench| bench.iter(|| black_box(predict(&params, &scenes[0].image).unwrap())));
    group.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
