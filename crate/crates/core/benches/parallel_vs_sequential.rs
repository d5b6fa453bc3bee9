use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng as _;

use radiomap::comgan::{Comgan, TrainConfig};
use radiomap::dataset::{fit_standardizer, mask_randomly, transform, Direction};
use radiomap::eval::{self, bootstrap_ci, ExperimentConfig};
use radiomap::exec::Execution;
use radiomap::refine;
use radiomap::rng;
use radiomap::scene::{build_database, Scene};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bootstrap(c: &mut Criterion) {
    let mut r = rng::stream(0, 0);
    let errors: Vec<f64> = (0..5_000).map(|_| r.random_range(-4.0..4.0)).collect();
    let mut g = c.benchmark_group("bootstrap_ci");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| bootstrap_ci(&errors, 500, 0.95, 1, exec).unwrap())
        });
    }
    g.finish();
}

fn completion(c: &mut Criterion) {
    let scene = Scene::default_indoor(0);
    let db = build_database(&scene, 100, &mut rng::stream(0, 100)).unwrap();
    let stats = fit_standardizer(&db, "bench").unwrap();
    let sparse = mask_randomly(&db, 1, &mut rng::stream(0, 1)).unwrap();
    let z = transform(&sparse, &stats, Direction::Forward).unwrap();
    let model = Comgan::new(scene.ru_count(), &TrainConfig::default(), scene.area_bounds).unwrap();
    let mut g = c.benchmark_group("complete_database");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| refine::complete_database(&model, &z, z.mask(), exec).unwrap())
        });
    }
    g.finish();
}

fn seeds(c: &mut Criterion) {
    let scene = Scene::default_indoor(0);
    let mut cfg = ExperimentConfig {
        samples_per_rp: 40,
        seeds: vec![0, 1, 2, 3],
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 1;
    cfg.train.steps_per_epoch = Some(5);
    let mut g = c.benchmark_group("prepare_seeds");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| eval::prepare_all(&scene, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bootstrap, completion, seeds);
criterion_main!(benches);
