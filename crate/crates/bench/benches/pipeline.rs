use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use wavekey_core::attacks::AttackKind;
use wavekey_core::audio::synth_dataset;
use wavekey_core::keygen::{generate_keys, KeygenConfig};
use wavekey_core::metrics::fsd;
use wavekey_core::optim::OptimizerConfig;
use wavekey_core::watermark::{objective, train, SampleSource};
use wavekey_core::Lambdas;

fn keygen(c: &mut Criterion) {
    let ds = synth_dataset(200, 1024, 16_000, 1).unwrap();
    let cfg = KeygenConfig::default();
    c.bench_function("keygen/4 keys, 200x1024", |b| {
        b.iter(|| generate_keys(black_box(&ds), 4, &cfg, 7).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let ds = synth_dataset(200, 1024, 16_000, 2).unwrap();
    let (keys, _) = generate_keys(&ds, 1, &KeygenConfig::default(), 3).unwrap();
    let key = &keys.keys()[0];
    let batch: Vec<&[f64]> = ds.clips()[..32].iter().map(|c| c.samples()).collect();
    let w = vec![0.01; 1024];
    c.bench_function("objective/batch 32", |b| {
        b.iter(|| objective(key, black_box(&w), &batch, None, 16_000, &Lambdas::SURROGATE))
    });

    let src = SampleSource::new(&ds);
    let opt = OptimizerConfig {
        max_iters: 100,
        ..OptimizerConfig::default()
    };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("100 iterations", |b| {
        b.iter(|| train(key, &src, Lambdas::SURROGATE, &opt, 4).unwrap())
    });
    g.finish();
}

fn attacks(c: &mut Criterion) {
    let ds = synth_dataset(4, 16_000, 16_000, 5).unwrap();
    let clip = &ds.clips()[0];
    let mut g = c.benchmark_group("attack/1s clip");
    for kind in AttackKind::CLASSES {
        let spec = kind.default_spec();
        let mut seed = 0u64;
        g.bench_function(kind.name(), |b| {
            b.iter_batched(
                || {
                    seed += 1;
                    seed
                },
                |s| spec.attack(clip, s).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn distance(c: &mut Criterion) {
    let a = synth_dataset(100, 4096, 16_000, 8).unwrap();
    let b = synth_dataset(100, 4096, 16_000, 9).unwrap();
    let mut g = c.benchmark_group("fsd");
    g.sample_size(10);
    g.bench_function("100 vs 100 clips of 4096", |bch| {
        bch.iter(|| fsd(black_box(a.clips()), b.clips()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, keygen, training, attacks, distance);
criterion_main!(benches);
