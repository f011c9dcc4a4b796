use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lcd_core::dataio::Family;
use lcd_core::geometry::{nn_match_with, NnMethod, PointCloud};
use lcd_core::par::Exec;
use lcd_core::trainer::{evaluate, init_params, load_data, train_step, LossMode, TrainConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("nn_match");
    for n in [256, 2048] {
        let (a, b) = (random_cloud(&mut rng, n), random_cloud(&mut rng, n));
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, _| {
                bench.iter(|| nn_match_with(&a, &b, NnMethod::KdTree, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for loss in [LossMode::Cd, LossMode::Lcd] {
        for (name, exec) in MODES {
            let config = TrainConfig {
                loss,
                exec,
                points: 128,
                shape_count: 8,
                families: vec![Family::Sphere, Family::Torus],
                ..TrainConfig::default()
            };
            let batch = load_data(&config).unwrap().clouds;
            let (lcd0, recon0) = init_params(&config).unwrap();
            group.bench_function(BenchmarkId::new(name, loss.name()), |bench| {
                bench.iter_batched(
                    || (lcd0.clone(), recon0.clone()),
                    |(mut lcd, mut recon)| train_step(&batch, &mut lcd, &mut recon, &config).unwrap(),
                    criterion::BatchSize::LargeInput,
                )
            });
        }
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    let config = TrainConfig {
        shape_count: 16,
        ..TrainConfig::default()
    };
    let data = load_data(&config).unwrap();
    let (_, recon) = init_params(&config).unwrap();
    for (name, exec) in MODES {
        group.bench_function(name, |bench| bench.iter(|| evaluate(&recon, &data, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matching, training_step, evaluation);
criterion_main!(benches);
